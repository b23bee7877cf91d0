//! Embedding-space analysis: bottleneck embeddings projected to 2D with a
//! from-scratch t-SNE, plus a silhouette score for cluster quality.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::imagery::{class_color, save_ppm, RgbImage, SegMask, Sketch};
use crate::rng::SplitMix64;
use crate::sketch2mask::{forward, UNetParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum_early: f64,
    pub momentum_late: f64,
    /// Iteration at which momentum switches from early to late.
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 15.0,
            iterations: 500,
            learning_rate: 100.0,
            momentum_early: 0.5,
            momentum_late: 0.8,
            momentum_switch: 250,
            exaggeration: 4.0,
            exaggeration_iters: 100,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.perplexity > 0.0) || self.perplexity >= n as f64 {
            return Err(Error::Config(format!(
                "perplexity {} must be in (0, n = {})",
                self.perplexity, n
            )));
        }
        Ok(())
    }
}

/// n points of dimension d with a group label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub n: usize,
    pub d: usize,
    pub points: Vec<f64>,
    pub labels: Vec<u8>,
}

impl EmbeddingSet {
    pub fn new(n: usize, d: usize, points: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config("need at least 2 points".into()));
        }
        if points.len() != n * d || labels.len() != n {
            return Err(Error::Config("embedding set shape mismatch".into()));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite embedding value at {i}")));
        }
        Ok(EmbeddingSet {
            n,
            d,
            points,
            labels,
        })
    }
}

/// Runs the network over a dataset and flattens each bottleneck embedding;
/// the group label is the sample's most frequent non-background class.
pub fn collect_embeddings(
    params: &UNetParams,
    data: &[(Sketch, SegMask)],
) -> Result<EmbeddingSet> {
    let d = params.config.embedding_len();
    let mut points = Vec::with_capacity(data.len() * d);
    let mut labels = Vec::with_capacity(data.len());
    for (sketch, mask) in data {
        let (_, emb) = forward(params, sketch)?;
        points.extend(emb.data);
        labels.push(dominant_class(mask));
    }
    EmbeddingSet::new(data.len(), d, points, labels)
}

fn dominant_class(mask: &SegMask) -> u8 {
    let mut hist = vec![0usize; mask.num_classes];
    for &l in &mask.labels {
        hist[l as usize] += 1;
    }
    // prefer foreground; fall back to background for empty masks
    let fg = hist
        .iter()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .filter(|(_, &c)| c > 0);
    fg.map(|(k, _)| k as u8).unwrap_or(0)
}

fn squared_distances(points: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut acc = 0.0;
            for k in 0..d {
                let diff = points[i * d + k] - points[j * d + k];
                acc += diff * diff;
            }
            dist[i * n + j] = acc;
            dist[j * n + i] = acc;
        }
    }
    dist
}

/// Row-conditional neighbor probabilities p_{j|i} with the Gaussian
/// bandwidth of each row found by binary search over the log-precision so
/// the row's perplexity (exp of Shannon entropy) matches the target within
/// 1e-5 (at most 100 steps).
pub fn conditional_affinities(points: &[f64], n: usize, d: usize, perplexity: f64) -> Result<Vec<f64>> {
    if perplexity >= n as f64 || perplexity <= 0.0 {
        return Err(Error::Config(format!(
            "perplexity {perplexity} must be in (0, n = {n})"
        )));
    }
    let dist = squared_distances(points, n, d);
    let target = perplexity.ln();
    let tol = 1e-5;
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let mut lo = -50.0f64; // log precision bounds
        let mut hi = 50.0f64;
        let mut converged = false;
        for _ in 0..100 {
            let beta = ((lo + hi) / 2.0).exp();
            let h = row_entropy(&dist[i * n..(i + 1) * n], i, beta, &mut row);
            if (h.exp() - perplexity).abs() <= tol {
                converged = true;
                break;
            }
            if h > target {
                // too many effective neighbors: sharpen
                lo = (lo + hi) / 2.0;
            } else {
                hi = (lo + hi) / 2.0;
            }
        }
        if !converged {
            // rows whose entropy does not respond to bandwidth (all
            // neighbors equidistant) are calibrated as well as possible
            let h_lo = row_entropy(&dist[i * n..(i + 1) * n], i, (-50.0f64).exp(), &mut row);
            let h_hi = row_entropy(&dist[i * n..(i + 1) * n], i, 50.0f64.exp(), &mut row);
            if (h_lo - h_hi).abs() > tol {
                return Err(Error::Numeric(format!(
                    "perplexity search did not converge for row {i}"
                )));
            }
            row_entropy(&dist[i * n..(i + 1) * n], i, ((lo + hi) / 2.0).exp(), &mut row);
        }
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    Ok(p)
}

/// Fills `row` with p_{j|i} at precision `beta` and returns the Shannon
/// entropy in nats.
fn row_entropy(dist_row: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let n = dist_row.len();
    // shift by the nearest-neighbor distance so the largest term is exactly 1
    // and the sum never underflows at high precision
    let d_min = dist_row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        row[j] = if j == i {
            0.0
        } else {
            (-beta * (dist_row[j] - d_min)).exp()
        };
        sum += row[j];
    }
    let mut h = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        *v /= sum;
        if j != i && *v > 0.0 {
            h -= *v * v.ln();
        }
    }
    h
}

/// Symmetrized joint affinities P = (P_cond + P_condᵀ) / (2n); zero
/// diagonal, sums to 1.
pub fn affinities(points: &[f64], n: usize, d: usize, perplexity: f64) -> Result<Vec<f64>> {
    let cond = conditional_affinities(points, n, d, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// n x 2 coordinates.
    pub coords: Vec<f64>,
    pub initial_kl: f64,
    pub final_kl: f64,
}

fn kl_divergence(p: &[f64], coords: &[f64], n: usize) -> f64 {
    let (q, _) = student_t_q(coords, n);
    let mut kl = 0.0;
    for i in 0..n * n {
        if p[i] > 0.0 {
            kl += p[i] * (p[i] / q[i].max(1e-12)).ln();
        }
    }
    kl
}

/// Student-t similarities: returns (normalized Q, unnormalized kernel).
fn student_t_q(coords: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = coords[i * 2] - coords[j * 2];
            let dy = coords[i * 2 + 1] - coords[j * 2 + 1];
            let k = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = k;
            num[j * n + i] = k;
            sum += 2.0 * k;
        }
    }
    let q = num.iter().map(|&v| v / sum).collect();
    (q, num)
}

/// Gradient descent on KL(P || Q) with a Student-t low-dimensional kernel,
/// early exaggeration, and a two-phase momentum schedule.
pub fn tsne_embed(p: &[f64], n: usize, cfg: &TsneConfig) -> Result<TsneResult> {
    cfg.validate(n)?;
    if p.len() != n * n {
        return Err(Error::Config("affinity matrix shape mismatch".into()));
    }
    let mut r = SplitMix64::new(cfg.seed);
    let mut coords: Vec<f64> = (0..2 * n).map(|_| 1e-4 * r.next_gaussian()).collect();
    let initial_kl = kl_divergence(p, &coords, n);
    let mut velocity = vec![0.0; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    for iter in 0..cfg.iterations {
        let exag = if iter < cfg.exaggeration_iters {
            cfg.exaggeration
        } else {
            1.0
        };
        let momentum = if iter < cfg.momentum_switch {
            cfg.momentum_early
        } else {
            cfg.momentum_late
        };
        let (q, num) = student_t_q(&coords, n);
        grad.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let idx = i * n + j;
                let coef = 4.0 * (exag * p[idx] - q[idx]) * num[idx];
                grad[i * 2] += coef * (coords[i * 2] - coords[j * 2]);
                grad[i * 2 + 1] += coef * (coords[i * 2 + 1] - coords[j * 2 + 1]);
            }
        }
        for k in 0..2 * n {
            velocity[k] = momentum * velocity[k] - cfg.learning_rate * grad[k];
            coords[k] += velocity[k];
            if !coords[k].is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite coordinate at iteration {iter}"
                )));
            }
        }
    }
    let final_kl = kl_divergence(p, &coords, n);
    Ok(TsneResult {
        coords,
        initial_kl,
        final_kl,
    })
}

/// Mean silhouette coefficient of a labeled point set (any dimension).
/// Points in singleton clusters score 0.
pub fn silhouette(points: &[f64], n: usize, d: usize, labels: &[u8]) -> Result<f64> {
    if labels.len() != n || points.len() != n * d || n < 2 {
        return Err(Error::Config("silhouette input shape mismatch".into()));
    }
    let clusters: Vec<u8> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    if clusters.len() < 2 {
        return Err(Error::Config("silhouette needs at least 2 clusters".into()));
    }
    let dist = squared_distances(points, n, d);
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size == 1 {
            continue; // contributes 0
        }
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for &cl in &clusters {
            let mut sum = 0.0;
            let mut count = 0usize;
            for j in 0..n {
                if j != i && labels[j] == cl {
                    sum += dist[i * n + j].sqrt();
                    count += 1;
                }
            }
            if count == 0 {
                continue;
            }
            let mean = sum / count as f64;
            if cl == own {
                a = mean;
            } else {
                b = b.min(mean);
            }
        }
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

/// Writes `prefix.csv` (x,y,label) and `prefix.ppm`, a raster scatter using
/// the fixed class palette on white.
pub fn export_scatter(
    coords: &[f64],
    labels: &[u8],
    num_classes: usize,
    prefix: &Path,
) -> Result<()> {
    let n = labels.len();
    if coords.len() != 2 * n {
        return Err(Error::Config("coords/labels length mismatch".into()));
    }
    let mut csv = String::from("x,y,label\n");
    for i in 0..n {
        csv.push_str(&format!(
            "{:.9},{:.9},{}\n",
            coords[i * 2],
            coords[i * 2 + 1],
            labels[i]
        ));
    }
    let csv_path = prefix.with_extension("csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    let size = 256usize;
    let mut img = RgbImage {
        width: size,
        height: size,
        data: vec![1.0; size * size * 3],
    };
    if n > 0 {
        let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            lo_x = lo_x.min(coords[i * 2]);
            hi_x = hi_x.max(coords[i * 2]);
            lo_y = lo_y.min(coords[i * 2 + 1]);
            hi_y = hi_y.max(coords[i * 2 + 1]);
        }
        let span_x = (hi_x - lo_x).max(1e-12);
        let span_y = (hi_y - lo_y).max(1e-12);
        let margin = 8;
        let inner = (size - 2 * margin) as f64;
        for i in 0..n {
            let px = margin as f64 + (coords[i * 2] - lo_x) / span_x * inner;
            let py = margin as f64 + (hi_y - coords[i * 2 + 1]) / span_y * inner;
            let color = class_color(labels[i] as usize, num_classes);
            let (cx, cy) = (px.round() as i64, py.round() as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                        let base = (y as usize * size + x as usize) * 3;
                        img.data[base..base + 3].copy_from_slice(&color);
                    }
                }
            }
        }
    }
    save_ppm(&img, &prefix.with_extension("ppm"))
}

/// 60-point three-cluster fixture used by the KL-decrease check.
pub fn three_cluster_fixture(seed: u64, per_cluster: usize, d: usize, spacing: f64) -> EmbeddingSet {
    let mut r = SplitMix64::new(seed);
    let n = 3 * per_cluster;
    let mut points = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..3u8 {
        // cluster centers along distinct axes
        let mut center = vec![0.0; d];
        center[c as usize % d] = spacing * (c as f64 + 1.0);
        for _ in 0..per_cluster {
            for k in 0..d {
                points.push(center[k] + r.next_gaussian());
            }
            labels.push(c + 1);
        }
    }
    EmbeddingSet::new(n, d, points, labels).expect("valid fixture")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch2mask::{init_params, UNetConfig};
    use tempfile::tempdir;

    #[test]
    fn two_points_conditional_is_one() {
        let points = [0.0, 0.0, 5.0, 1.0]; // n=2, d=2
        let cond = conditional_affinities(&points, 2, 2, 1.5).unwrap();
        assert!((cond[1] - 1.0).abs() < 1e-12);
        assert!((cond[2] - 1.0).abs() < 1e-12);
        assert_eq!(cond[0], 0.0);
        assert_eq!(cond[3], 0.0);
    }

    #[test]
    fn three_equidistant_uniform_conditionals() {
        // equilateral triangle: symmetry forces 0.5 everywhere off-diagonal
        let s = 3.0f64.sqrt() / 2.0;
        let points = [0.0, 0.0, 1.0, 0.0, 0.5, s];
        let cond = conditional_affinities(&points, 3, 2, 2.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 0.5 };
                assert!((cond[i * 3 + j] - expect).abs() < 1e-9, "{i},{j}");
            }
        }
    }

    #[test]
    fn affinity_matrix_properties() {
        let set = three_cluster_fixture(3, 10, 4, 10.0);
        let n = set.n;
        let p = affinities(&set.points, n, set.d, 5.0).unwrap();
        let mut sum = 0.0;
        for i in 0..n {
            assert_eq!(p[i * n + i], 0.0, "diagonal must be zero");
            for j in 0..n {
                assert!(p[i * n + j] >= 0.0);
                assert!((p[i * n + j] - p[j * n + i]).abs() < 1e-15);
                sum += p[i * n + j];
            }
        }
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_calibration_within_tolerance() {
        let set = three_cluster_fixture(4, 12, 5, 8.0);
        let target = 7.0;
        let cond = conditional_affinities(&set.points, set.n, set.d, target).unwrap();
        for i in 0..set.n {
            let mut h = 0.0;
            for j in 0..set.n {
                let v = cond[i * set.n + j];
                if v > 0.0 {
                    h -= v * v.ln();
                }
            }
            assert!(
                (h.exp() - target).abs() <= 1e-5,
                "row {i} perplexity {}",
                h.exp()
            );
        }
    }

    #[test]
    fn affinities_translation_invariant() {
        let set = three_cluster_fixture(5, 6, 3, 6.0);
        let shifted: Vec<f64> = set
            .points
            .iter()
            .enumerate()
            .map(|(i, &v)| v + [100.0, -40.0, 7.5][i % 3])
            .collect();
        let a = affinities(&set.points, set.n, set.d, 5.0).unwrap();
        let b = affinities(&shifted, set.n, set.d, 5.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_decreases_on_cluster_fixture() {
        let set = three_cluster_fixture(6, 20, 8, 12.0);
        let p = affinities(&set.points, set.n, set.d, 10.0).unwrap();
        let cfg = TsneConfig {
            iterations: 300,
            ..Default::default()
        };
        let result = tsne_embed(&p, set.n, &cfg).unwrap();
        assert!(
            result.final_kl < result.initial_kl,
            "KL {} -> {}",
            result.initial_kl,
            result.final_kl
        );
    }

    #[test]
    fn tsne_deterministic() {
        let set = three_cluster_fixture(7, 8, 4, 9.0);
        let p = affinities(&set.points, set.n, set.d, 6.0).unwrap();
        let cfg = TsneConfig {
            iterations: 50,
            seed: 11,
            ..Default::default()
        };
        let a = tsne_embed(&p, set.n, &cfg).unwrap();
        let b = tsne_embed(&p, set.n, &cfg).unwrap();
        assert_eq!(a.coords, b.coords);
    }

    #[test]
    fn separated_clusters_good_silhouette() {
        let set = three_cluster_fixture(8, 20, 6, 15.0);
        let p = affinities(&set.points, set.n, set.d, 10.0).unwrap();
        let result = tsne_embed(&p, set.n, &TsneConfig::default()).unwrap();
        let s = silhouette(&result.coords, set.n, 2, &set.labels).unwrap();
        assert!(s >= 0.5, "silhouette {s}");
    }

    #[test]
    fn silhouette_hand_case() {
        // 1D points 0,1 (cluster 0) and 10,11 (cluster 1)
        let points = [0.0, 1.0, 10.0, 11.0];
        let labels = [0u8, 0, 1, 1];
        let s = silhouette(&points, 4, 1, &labels).unwrap();
        // each point: a = 1, b = mean distance to the other pair
        let expect = ((10.5 - 1.0) / 10.5 + (9.5 - 1.0) / 9.5) / 2.0;
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn silhouette_rejects_single_cluster() {
        let points = [0.0, 1.0, 2.0];
        assert!(silhouette(&points, 3, 1, &[2, 2, 2]).is_err());
    }

    #[test]
    fn collect_embeddings_shape_and_determinism() {
        let cfg = UNetConfig::selftest_small();
        let params = init_params(&cfg, 1).unwrap();
        let n = cfg.input_size;
        let mut r = SplitMix64::new(2);
        let data: Vec<(Sketch, SegMask)> = (0..5)
            .map(|_| {
                let sketch = Sketch {
                    width: n,
                    height: n,
                    data: (0..n * n)
                        .map(|_| if r.next_f64() < 0.3 { 1.0 } else { 0.0 })
                        .collect(),
                };
                let mask = SegMask::new(
                    n,
                    n,
                    cfg.num_classes,
                    (0..n * n)
                        .map(|_| r.below(cfg.num_classes) as u8)
                        .collect(),
                )
                .unwrap();
                (sketch, mask)
            })
            .collect();
        let a = collect_embeddings(&params, &data).unwrap();
        let b = collect_embeddings(&params, &data).unwrap();
        assert_eq!(a.n, 5);
        assert_eq!(a.d, cfg.embedding_len());
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn export_scatter_files() {
        let dir = tempdir().unwrap();
        let prefix = dir.path().join("scatter");
        let coords = [0.0, 0.0, 1.0, 1.0, -1.0, 0.5];
        export_scatter(&coords, &[1, 2, 3], 6, &prefix).unwrap();
        let csv = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("x,y,label\n"));
        assert!(prefix.with_extension("ppm").is_file());
        // empty input: header-only CSV
        let prefix2 = dir.path().join("empty");
        export_scatter(&[], &[], 6, &prefix2).unwrap();
        let csv = std::fs::read_to_string(prefix2.with_extension("csv")).unwrap();
        assert_eq!(csv, "x,y,label\n");
    }
}
