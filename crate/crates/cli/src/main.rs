use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bosfv::classifier::{evaluate, train_linear, LinearClassifier};
use bosfv::descriptors::{DescriptorBag, EmbeddingTag, PcaProjection};
use bosfv::encoders::ModelKind;
use bosfv::io::{self, EncodingSet};
use bosfv::mfafsnet::{self, FinetuneState};
use bosfv::mixtures::fit_mfa_em;
use bosfv::oracle::{gradient_suite, InstanceKind};
use bosfv::pipeline::{
    count_classes, embed_bags, encode_bags, fit_model, fit_pca_stage, hybrid_table, labels_of,
    project_bags, run_hybrids, run_pipeline, EncoderBundle, PipelineConfig, CLASSIFIER_KIND,
    ENCODER_KIND, METRICS_KIND,
};
use bosfv::synth::{gen_synth_simplex, Geometry, SynthConfig};

/// Fisher encodings of bags of semantic descriptors.
#[derive(Parser, Debug)]
#[command(name = "bosfv", version)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.k=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed; replaces `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Leave wall-clock timings out of the artifacts so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the two-object synthetic scene data set.
    Synth(SynthArgs),
    /// Embed, project and fit the background mixture.
    TrainMixture {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a bag file with a trained encoder.
    Encode {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        bags: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the linear classifier on an encoding file.
    TrainClassifier {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a classifier on an encoding file.
    Evaluate {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        encodings: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the MFA-FS layer and classifier jointly.
    Finetune {
        #[arg(long)]
        train: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of initializing from EM.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare analytic Fisher scores with finite differences on random models.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage and write all artifacts into a directory.
    Pipeline {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also run the four assignment × scaling generic encoders.
        #[arg(long)]
        hybrids: bool,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    n_per_class: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    descriptors_per_bag: usize,
    #[arg(long, default_value = "gaussian_l2")]
    geometry: Geometry,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not KEY=VALUE"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{key}` is not a section"))?;
    }
    cur.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut table: toml::Table = toml::from_str(&text).context("parsing config")?;
    for o in &cli.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(seed) = cli.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    Ok(PipelineConfig::from_toml_str(&toml::to_string(&table)?)?)
}

fn input_tag(cfg: &PipelineConfig) -> EmbeddingTag {
    if cfg.embedding.tag == EmbeddingTag::Nu2 {
        EmbeddingTag::Nu2
    } else {
        EmbeddingTag::Raw
    }
}

fn load(path: &Path, tag: EmbeddingTag) -> Result<Vec<DescriptorBag>> {
    io::load_bags(path, tag).with_context(|| format!("reading bag file {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    io::save_model(path, kind, body).with_context(|| format!("writing {}", path.display()))
}

fn synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let data = gen_synth_simplex(&SynthConfig {
        n_per_class: args.n_per_class,
        classes: args.classes,
        descriptors_per_bag: args.descriptors_per_bag,
        geometry: args.geometry,
        seed,
    })?;
    fs::create_dir_all(&args.out)?;
    for (name, bags) in [
        ("train.bosf", &data.train),
        ("test.bosf", &data.test),
        ("train_logits.bosf", &data.train_logits),
        ("test_logits.bosf", &data.test_logits),
    ] {
        io::save_bags(args.out.join(name), bags)?;
    }
    println!(
        "wrote {} train and {} test bags to {}",
        data.train.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

fn train_mixture(cfg: &PipelineConfig, train: &Path, out: &Path) -> Result<()> {
    let bags = load(train, input_tag(cfg))?;
    let embedded = embed_bags(&bags, &cfg.embedding)?;
    let pca = fit_pca_stage(&embedded, cfg.effective_pca_dim())?;
    let projected = project_bags(pca.as_ref(), &embedded)?;
    let (model, info) = fit_model(&projected, cfg)?;
    let bundle = EncoderBundle {
        embedding: cfg.embedding.clone(),
        pca,
        model,
        variant: cfg.variant(),
        power: cfg.encoder.power,
        mean_pool: cfg.encoder.mean_pool,
    };
    write_json(out, ENCODER_KIND, &bundle)?;
    println!(
        "EM: {} iterations, converged {}, final log-likelihood {:.6}",
        info.iterations, info.converged, info.final_loglik
    );
    Ok(())
}

fn encode(encoder: &Path, bags: &Path, out: &Path) -> Result<()> {
    let bundle: EncoderBundle = io::load_model(encoder, ENCODER_KIND)?;
    let tag = if bundle.embedding.tag == EmbeddingTag::Nu2 {
        EmbeddingTag::Nu2
    } else {
        EmbeddingTag::Raw
    };
    let bags = load(bags, tag)?;
    let enc = encode_bags(&bundle, &bags)?;
    let set = EncodingSet::from_encodings(&enc, bags.iter().map(|b| b.label).collect())?;
    io::save_encodings(out, &set)?;
    println!("encoded {} bags, length {}", set.len(), set.dim());
    Ok(())
}

fn labeled(set: &EncodingSet) -> Result<Vec<usize>> {
    set.labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.with_context(|| format!("encoding {i} has no label")))
        .collect()
}

fn train_classifier(cfg: &PipelineConfig, train: &Path, out: &Path) -> Result<()> {
    let set = io::load_encodings(train)?;
    let labels = labeled(&set)?;
    let classes = count_classes(&labels)?;
    let clf = train_linear(&set.vectors, &labels, classes, &cfg.classifier_cfg())?;
    write_json(out, CLASSIFIER_KIND, &clf)?;
    let ev = evaluate(&clf, &set.vectors, &labels)?;
    println!(
        "training mean per-class accuracy {:.4}",
        ev.mean_per_class_accuracy
    );
    Ok(())
}

fn print_table(per_class: &[Option<f64>]) {
    println!("class  accuracy");
    for (c, a) in per_class.iter().enumerate() {
        match a {
            Some(a) => println!("{c:>5}  {a:.4}"),
            None => println!("{c:>5}  -"),
        }
    }
}

fn evaluate_cmd(classifier: &Path, encodings: &Path, out: Option<&Path>) -> Result<()> {
    let clf: LinearClassifier = io::load_model(classifier, CLASSIFIER_KIND)?;
    let set = io::load_encodings(encodings)?;
    let labels = labeled(&set)?;
    let ev = evaluate(&clf, &set.vectors, &labels)?;
    print_table(&ev.per_class_accuracy);
    println!("mean per-class accuracy {:.4}", ev.mean_per_class_accuracy);
    if let Some(p) = out {
        write_json(p, "evaluation", &ev)?;
    }
    Ok(())
}

fn finetune(cfg: &PipelineConfig, train: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    if cfg.model.kind != ModelKind::Mfa {
        bail!("finetune needs model.kind = \"mfa\"");
    }
    let bags = load(train, input_tag(cfg))?;
    let embedded = embed_bags(&bags, &cfg.embedding)?;
    let power = cfg.finetune.power;
    let state = match resume {
        Some(p) => {
            FinetuneState::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?
        }
        None => {
            let pca = fit_pca_stage(&embedded, cfg.pca_dim)?;
            let projected = project_bags(pca.as_ref(), &embedded)?;
            let m = fit_mfa_em(&projected, cfg.model.components(), cfg.model.r, &cfg.em())?.model;
            let d_in = embedded[0].dim();
            let layer = mfafsnet::layer_init_from_mfa(
                &m,
                pca.unwrap_or_else(|| PcaProjection::identity(d_in)),
            )?;
            let classes = count_classes(&labels_of(&embedded)?)?;
            let clf = mfafsnet::pretrain_classifier(
                &layer,
                &embedded,
                classes,
                power,
                &cfg.classifier_cfg(),
            )?;
            FinetuneState::new(layer, clf)
        }
    };
    let tcfg = bosfv::mfafsnet::TrainingConfig {
        seed: cfg.seed,
        ..cfg.finetune.clone()
    };
    let state = mfafsnet::resume(state, &embedded, &tcfg)?;
    state.save(out)?;
    for e in &state.history {
        println!(
            "epoch {:>3}  loss {:.6}  acc {:.4}  |Ω−PΛ|/|Ω| {:.3e}  |P−Pᵀ| {:.3e}",
            e.epoch, e.loss, e.running_accuracy, e.omega_deviation_rel, e.asymmetry
        );
    }
    let acc = mfafsnet::accuracy(&state.layer, &state.classifier, &embedded, power)?;
    println!("training accuracy {acc:.4}");
    Ok(())
}

fn gradcheck(instances: usize, tolerance: f64, seed: u64, out: Option<&Path>) -> Result<()> {
    let entries = gradient_suite(instances, seed, tolerance)?;
    let mut failed = 0;
    for kind in [InstanceKind::Gmm, InstanceKind::Dmm, InstanceKind::Mfa] {
        let mine: Vec<_> = entries.iter().filter(|e| e.kind == kind).collect();
        let worst = mine
            .iter()
            .map(|e| e.report.max_rel_err)
            .fold(0.0, f64::max);
        let bad = mine.iter().filter(|e| !e.report.passed()).count();
        failed += bad;
        println!(
            "{kind:?}: {} instances, max relative error {worst:.3e}, {bad} failing",
            mine.len()
        );
    }
    if let Some(p) = out {
        write_json(p, "gradcheck", &entries)?;
    }
    if failed > 0 {
        bail!("{failed} instance(s) exceed tolerance {tolerance:e}");
    }
    Ok(())
}

fn pipeline(
    cfg: &PipelineConfig,
    train: &Path,
    test: &Path,
    out: &Path,
    hybrids: bool,
    deterministic: bool,
) -> Result<()> {
    let tag = input_tag(cfg);
    let (train, test) = (load(train, tag)?, load(test, tag)?);
    let run = run_pipeline(cfg, &train, &test)?;
    run.write_artifacts(out)?;
    if deterministic {
        fs::remove_file(out.join("timings.json"))?;
    }
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    print_table(
        &run.report
            .per_class
            .iter()
            .map(|r| r.accuracy)
            .collect::<Vec<_>>(),
    );
    println!(
        "mean per-class accuracy {:.4}",
        run.report.mean_per_class_accuracy
    );
    if hybrids {
        if tag != EmbeddingTag::Raw {
            bail!("--hybrids needs raw probability bags (embedding other than nu2)");
        }
        let rows = run_hybrids(cfg, &train, &test)?;
        let table = hybrid_table(&rows);
        print!("{table}");
        fs::write(out.join("hybrids.txt"), &table)?;
        write_json(&out.join("hybrids.json"), METRICS_KIND, &rows)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth(a) => synth(a, cfg.seed),
        Command::TrainMixture { train, out } => train_mixture(&cfg, train, out),
        Command::Encode { encoder, bags, out } => encode(encoder, bags, out),
        Command::TrainClassifier { train, out } => train_classifier(&cfg, train, out),
        Command::Evaluate {
            classifier,
            encodings,
            out,
        } => evaluate_cmd(classifier, encodings, out.as_deref()),
        Command::Finetune { train, out, resume } => finetune(&cfg, train, out, resume.as_deref()),
        Command::Gradcheck {
            instances,
            tolerance,
            out,
        } => gradcheck(*instances, *tolerance, cfg.seed, out.as_deref()),
        Command::Pipeline {
            train,
            test,
            out,
            hybrids,
        } => pipeline(&cfg, train, test, out, *hybrids, cli.deterministic),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_build_nested_tables() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "model.k=4").unwrap();
        apply_override(&mut t, "embedding.tag=nu2").unwrap();
        apply_override(&mut t, "encoder.power = 0.25").unwrap();
        let cfg = PipelineConfig::from_toml_str(&toml::to_string(&t).unwrap()).unwrap();
        assert_eq!(cfg.model.k, Some(4));
        assert_eq!(cfg.embedding.tag, EmbeddingTag::Nu2);
        assert_eq!(cfg.encoder.power, 0.25);
        assert!(apply_override(&mut t, "novalue").is_err());
    }
}
