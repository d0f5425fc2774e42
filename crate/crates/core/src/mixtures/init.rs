use nalgebra::DVector;
use rand::Rng;

use crate::rng::stream_rng;
use crate::{Error, Result};

/// Per-dimension (biased) variance and mean of a point set.
pub fn global_variance(points: &[&DVector<f64>]) -> Result<(DVector<f64>, DVector<f64>)> {
    let first = points.first().ok_or(Error::Empty("points"))?;
    let n = points.len() as f64;
    let mut mean = DVector::zeros(first.len());
    for p in points {
        mean += *p;
    }
    mean /= n;
    let mut var = DVector::zeros(first.len());
    for p in points {
        var += (*p - &mean).map(|x| x * x);
    }
    var /= n;
    Ok((mean, var))
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by `lloyd_iter` Lloyd steps.
///
/// Returns the centers and the hard assignment of every point.
pub fn kmeans_pp(
    points: &[&DVector<f64>],
    k: usize,
    lloyd_iter: usize,
    seed: u64,
) -> Result<(Vec<DVector<f64>>, Vec<usize>)> {
    if points.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k,
            have: points.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![0usize; n];
    for it in 0..=lloyd_iter {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if it == lloyd_iter || (it > 0 && !changed) {
            break;
        }
        let dim = centers[0].len();
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (a, p) in assign.iter().zip(points) {
            sums[*a] += *p;
            counts[*a] += 1;
        }
        for ((c, s), cnt) in centers.iter_mut().zip(sums).zip(counts) {
            // empty clusters keep their previous center
            if cnt > 0 {
                *c = s / cnt as f64;
            }
        }
    }
    Ok((centers, assign))
}
