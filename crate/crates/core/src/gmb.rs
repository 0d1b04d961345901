//! Global memory bank: k-medoids compaction of encoded training windows and
//! the `GMB1` binary file format.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, PfrpError, Result};
use crate::io::write_atomic;
use crate::pcl::{stack_rows, Encoder};
use crate::series::WindowSample;

pub const BANK_MAGIC: &[u8; 4] = b"GMB1";
pub const DEFAULT_BANK_HORIZON: usize = 720;
const FLAG_RAW_X: u32 = 1;

/// Best (K, k) per benchmark dataset.
pub fn default_bank_size(dataset: &str) -> Option<(usize, usize)> {
    let table = [
        ("traffic", 4000, 10),
        ("electricity", 1000, 20),
        ("weather", 4000, 20),
        ("etth1", 1000, 50),
        ("etth2", 1000, 50),
        ("ettm1", 3000, 200),
        ("ettm2", 3000, 100),
    ];
    let key = dataset.to_ascii_lowercase();
    table
        .iter()
        .find(|(name, _, _)| *name == key)
        .map(|&(_, big_k, small_k)| (big_k, small_k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmedoidsResult {
    /// Ascending indices into the input set.
    pub medoid_indices: Vec<usize>,
    /// For each point, the position of its medoid in `medoid_indices`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
    /// Cost after every assignment step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KmedoidsOptions {
    /// Rounds per run.
    pub max_iter: usize,
    /// Independent k-means++ initializations; the cheapest result is kept.
    pub restarts: usize,
}

impl Default for KmedoidsOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            restarts: 5,
        }
    }
}

/// Alternating k-medoids under cosine distance with k-means++ seeding.
///
/// Each round assigns every point to its nearest medoid (ties to the lower
/// medoid index) and then moves each medoid to the cluster member with the
/// smallest summed distance. A run stops when no medoid moves or after
/// `max_iter` rounds. Of `restarts` runs the lowest-cost one is returned
/// (the earliest on ties).
pub fn kmedoids(points: ArrayView2<f64>, k: usize, seed: u64, opts: &KmedoidsOptions) -> Result<KmedoidsResult> {
    let n = points.nrows();
    if k < 1 || k > n {
        return Err(PfrpError::invalid(format!("K = {k} must lie in [1, {n}]")));
    }
    let owned = points.as_standard_layout();
    let points = owned.view();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = alternate(points, k, &mut rng, opts.max_iter);
    for _ in 1..opts.restarts {
        let run = alternate(points, k, &mut rng, opts.max_iter);
        if run.total_cost < best.total_cost {
            best = run;
        }
    }
    Ok(best)
}

fn alternate(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng, max_iter: usize) -> KmedoidsResult {
    let mut medoids = kmeanspp_init(points, k, rng);

    let mut cost_history = Vec::new();
    let mut iterations = 0;
    loop {
        medoids.sort_unstable();
        let (assignment, dists) = assign(points, &medoids);
        let cost: f64 = dists.iter().sum();
        cost_history.push(cost);
        if iterations >= max_iter {
            return KmedoidsResult {
                medoid_indices: medoids,
                assignment,
                total_cost: cost,
                cost_history,
                iterations,
            };
        }
        iterations += 1;

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i);
        }
        let mut changed = false;
        for (c, group) in members.iter().enumerate() {
            // Summed cosine distance to the group is |group| - a·Σb, so one
            // pass over the group's sum vector scores every candidate.
            let mut sum = vec![0.0; points.ncols()];
            for &j in group {
                for (s, v) in sum.iter_mut().zip(points.row(j)) {
                    *s += v;
                }
            }
            let score = |i: usize| -> f64 {
                group.len() as f64 - points.row(i).iter().zip(&sum).map(|(a, b)| a * b).sum::<f64>()
            };
            let current = score(medoids[c]);
            let mut best = (medoids[c], current);
            for &j in group {
                let s = score(j);
                if s < best.1 - 1e-12 * (1.0 + current.abs()) {
                    best = (j, s);
                }
            }
            if best.0 != medoids[c] {
                medoids[c] = best.0;
                changed = true;
            }
        }
        if !changed {
            // Medoids are already sorted and unchanged: the last assignment stands.
            return KmedoidsResult {
                medoid_indices: medoids,
                assignment,
                total_cost: cost,
                cost_history,
                iterations,
            };
        }
    }
}

fn kmeanspp_init(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.nrows();
    let mut medoids = vec![rng.gen_range(0..n)];
    let first = row(points, medoids[0]);
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| cosine_distance(row(points, i), first).max(0.0))
        .collect();
    nearest[medoids[0]] = 0.0;
    while medoids.len() < k {
        let total: f64 = nearest.iter().map(|d| d * d).sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut chosen = None;
            for (i, d) in nearest.iter().enumerate() {
                let w = d * d;
                if w > 0.0 && r < w {
                    chosen = Some(i);
                    break;
                }
                r -= w;
            }
            // Rounding can exhaust `r` past the last positive weight.
            chosen.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            (0..n).find(|i| !medoids.contains(i)).expect("k <= n")
        };
        medoids.push(pick);
        let m = row(points, pick);
        for (i, d) in nearest.iter_mut().enumerate() {
            let nd = cosine_distance(row(points, i), m).max(0.0);
            if nd < *d {
                *d = nd;
            }
        }
        for &m in &medoids {
            nearest[m] = 0.0;
        }
    }
    medoids
}

fn row<'a>(points: ArrayView2<'a, f64>, i: usize) -> &'a [f64] {
    let width = points.ncols();
    let all = points.to_slice().expect("standard layout");
    &all[i * width..(i + 1) * width]
}

/// Nearest medoid per point (positions into `medoids`) and its distance.
fn assign(points: ArrayView2<f64>, medoids: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let centers = stack_rows(medoids.iter().map(|&m| row(points, m))).expect("equal widths");
    let n = points.nrows();
    let mut assignment = vec![0; n];
    let mut dists = vec![0.0; n];
    const CHUNK: usize = 1024;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let sims = points.slice(ndarray::s![start..end, ..]).dot(&centers.t());
        for (r, row) in sims.rows().into_iter().enumerate() {
            let mut best = 0;
            let mut best_d = 1.0 - row[0];
            for (c, &s) in row.iter().enumerate().skip(1) {
                let d = 1.0 - s;
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            assignment[start + r] = best;
            dists[start + r] = best_d;
        }
    }
    for (c, &m) in medoids.iter().enumerate() {
        assignment[m] = c;
        dists[m] = 0.0;
    }
    (assignment, dists)
}

/// Compacted store of (feature, horizon) exemplars.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub lookback: usize,
    pub horizon: usize,
    pub feature_dim: usize,
    /// `K x d` unit-norm keys.
    pub keys: Array2<f64>,
    /// `K x horizon` stored futures.
    pub values: Array2<f64>,
    /// `K x lookback` raw lookback windows, when built with them.
    pub raw_x: Option<Array2<f64>>,
    pub start_indices: Vec<u64>,
    pub encoder_hash: String,
    pub seed: u64,
    pub dataset: String,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key(&self, i: usize) -> &[f64] {
        self.keys.row(i).to_slice().expect("standard layout")
    }

    pub fn value(&self, i: usize) -> &[f64] {
        self.values.row(i).to_slice().expect("standard layout")
    }

    pub fn raw_window(&self, i: usize) -> Option<&[f64]> {
        self.raw_x
            .as_ref()
            .map(|x| x.row(i).to_slice().expect("standard layout"))
    }

    /// Describes the mismatch when the bank was not built with `encoder`.
    pub fn encoder_mismatch(&self, encoder: &Encoder) -> Option<String> {
        let hash = encoder.content_hash();
        (hash != self.encoder_hash).then(|| {
            format!(
                "memory bank was built with encoder {} but the loaded encoder is {hash}",
                self.encoder_hash
            )
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(BANK_MAGIC);
        for v in [self.lookback, self.horizon, self.feature_dim, self.len()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let flags = if self.raw_x.is_some() { FLAG_RAW_X } else { 0 };
        buf.extend_from_slice(&flags.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for s in [&self.encoder_hash, &self.dataset] {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        }
        for i in 0..self.len() {
            buf.extend_from_slice(&self.start_indices[i].to_le_bytes());
            let rows = [Some(self.key(i)), Some(self.value(i)), self.raw_window(i)];
            for v in rows.into_iter().flatten().flatten() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(PfrpError::data("bank file is too short"));
        }
        if &bytes[..3] != b"GMB" {
            return Err(PfrpError::data("not a memory bank file (bad magic)"));
        }
        if &bytes[..4] != BANK_MAGIC {
            return Err(PfrpError::Version(format!(
                "bank format {:?}",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(PfrpError::Checksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 4 };
        let lookback = r.u32()? as usize;
        let horizon = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let k = r.u32()? as usize;
        let flags = r.u32()?;
        let seed = r.u64()?;
        let encoder_hash = r.string()?;
        let dataset = r.string()?;
        let has_x = flags & FLAG_RAW_X != 0;
        let mut keys = Vec::with_capacity(k * feature_dim);
        let mut values = Vec::with_capacity(k * horizon);
        let mut raw = Vec::new();
        let mut start_indices = Vec::with_capacity(k);
        for _ in 0..k {
            start_indices.push(r.u64()?);
            for _ in 0..feature_dim {
                keys.push(r.f64()?);
            }
            for _ in 0..horizon {
                values.push(r.f64()?);
            }
            if has_x {
                for _ in 0..lookback {
                    raw.push(r.f64()?);
                }
            }
        }
        if r.pos != body.len() {
            return Err(PfrpError::data("trailing bytes in bank file"));
        }
        let shape_err = |e: ndarray::ShapeError| PfrpError::data(e.to_string());
        Ok(Self {
            lookback,
            horizon,
            feature_dim,
            keys: Array2::from_shape_vec((k, feature_dim), keys).map_err(shape_err)?,
            values: Array2::from_shape_vec((k, horizon), values).map_err(shape_err)?,
            raw_x: if has_x {
                Some(Array2::from_shape_vec((k, lookback), raw).map_err(shape_err)?)
            } else {
                None
            },
            start_indices,
            encoder_hash,
            seed,
            dataset,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(PfrpError::data("bank file ends early"));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| PfrpError::data(e.to_string()))
    }
}

pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<()> {
    write_atomic(path, &bank.to_bytes())
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    let bytes = std::fs::read(path).map_err(|e| PfrpError::io(path, e))?;
    MemoryBank::from_bytes(&bytes)
}

/// First `horizon` steps of a stored future.
pub fn slice_horizon(y: &[f64], horizon: usize) -> Result<&[f64]> {
    if horizon > y.len() {
        return Err(PfrpError::invalid(format!(
            "horizon {horizon} exceeds the stored horizon {}",
            y.len()
        )));
    }
    Ok(&y[..horizon])
}

#[derive(Debug, Clone)]
pub struct BankOptions {
    pub size: usize,
    pub seed: u64,
    pub store_raw_x: bool,
    pub dataset: String,
    pub clustering: KmedoidsOptions,
}

impl Default for BankOptions {
    fn default() -> Self {
        Self {
            size: 1000,
            seed: 0,
            store_raw_x: false,
            dataset: String::new(),
            clustering: KmedoidsOptions::default(),
        }
    }
}

/// Encodes `samples`, clusters their features and keeps the medoids.
pub fn build_bank(encoder: &Encoder, samples: &[WindowSample], opts: &BankOptions) -> Result<MemoryBank> {
    if samples.len() < opts.size {
        return Err(PfrpError::invalid(format!(
            "{} training windows, fewer than the bank size {}",
            samples.len(),
            opts.size
        )));
    }
    let horizon = samples[0].y.len();
    for s in samples {
        check_len("encoder lookback", encoder.lookback(), s.x.len())?;
        check_len("sample horizon", horizon, s.y.len())?;
    }
    let x = stack_rows(samples.iter().map(|s| &s.x[..]))?;
    let feats = encoder.encode_batch(x.view())?;
    let clusters = kmedoids(feats.view(), opts.size, opts.seed, &opts.clustering)?;
    let pick = |f: &dyn Fn(&WindowSample) -> &[f64]| {
        stack_rows(clusters.medoid_indices.iter().map(|&i| f(&samples[i])))
    };
    let keys = stack_rows(
        clusters
            .medoid_indices
            .iter()
            .map(|&i| feats.row(i).to_slice().expect("standard layout")),
    )?;
    Ok(MemoryBank {
        lookback: encoder.lookback(),
        horizon,
        feature_dim: encoder.feature_dim(),
        keys,
        values: pick(&|s| &s.y)?,
        raw_x: if opts.store_raw_x {
            Some(pick(&|s| &s.x)?)
        } else {
            None
        },
        start_indices: clusters
            .medoid_indices
            .iter()
            .map(|&i| samples[i].start_index as u64)
            .collect(),
        encoder_hash: encoder.content_hash(),
        seed: opts.seed,
        dataset: opts.dataset.clone(),
    })
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::pcl::normalize_rows;

    fn random_unit(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        normalize_rows(&mut m);
        m
    }

    #[test]
    fn k_equals_n_gives_zero_cost() {
        let p = random_unit(7, 3, 1);
        let r = kmedoids(p.view(), 7, 0, &KmedoidsOptions::default()).unwrap();
        assert_eq!(r.medoid_indices, (0..7).collect::<Vec<_>>());
        assert_eq!(r.total_cost, 0.0);
        assert_eq!(r.assignment, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_k() {
        let p = random_unit(4, 3, 1);
        assert!(kmedoids(p.view(), 0, 0, &KmedoidsOptions::default()).is_err());
        assert!(kmedoids(p.view(), 5, 0, &KmedoidsOptions::default()).is_err());
    }

    #[test]
    fn two_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Array2::zeros((20, 3));
        for i in 0..20 {
            let sign = if i < 10 { 1.0 } else { -1.0 };
            p[[i, 0]] = sign;
            p[[i, 1]] = rng.gen_range(-0.2..0.2);
            p[[i, 2]] = rng.gen_range(-0.2..0.2);
        }
        normalize_rows(&mut p);
        // Every cross-cluster cosine is negative.
        for i in 0..10 {
            for j in 10..20 {
                assert!(p.row(i).dot(&p.row(j)) < 0.0);
            }
        }
        for seed in 0..10 {
            let r = kmedoids(p.view(), 2, seed, &KmedoidsOptions::default()).unwrap();
            assert!(r.medoid_indices[0] < 10 && r.medoid_indices[1] >= 10);
            for i in 0..20 {
                assert_eq!(r.assignment[i], usize::from(i >= 10));
            }
        }
    }

    #[test]
    fn tiny_instance_matches_exhaustive_optimum() {
        let p = random_unit(4, 3, 11);
        let mut best = f64::INFINITY;
        for a in 0..4 {
            for b in a + 1..4 {
                let c: f64 = (0..4)
                    .map(|i| {
                        let row = p.row(i).to_vec();
                        cosine_distance(&row, &p.row(a).to_vec())
                            .min(cosine_distance(&row, &p.row(b).to_vec()))
                    })
                    .sum();
                best = best.min(c);
            }
        }
        let r = kmedoids(p.view(), 2, 3, &KmedoidsOptions::default()).unwrap();
        assert!((r.total_cost - best).abs() < 1e-12, "{} vs {best}", r.total_cost);
    }

    #[test]
    fn cost_never_increases() {
        for seed in 0..10 {
            let p = random_unit(200, 5, seed);
            let r = kmedoids(p.view(), 12, seed, &KmedoidsOptions::default()).unwrap();
            for w in r.cost_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.cost_history);
            }
            let mut sorted = r.medoid_indices.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), 12);
            for (c, &m) in r.medoid_indices.iter().enumerate() {
                assert_eq!(r.assignment[m], c);
            }
        }
    }

    fn bank_fixture(raw: bool) -> MemoryBank {
        let mut keys = random_unit(5, 3, 2);
        normalize_rows(&mut keys);
        MemoryBank {
            lookback: 4,
            horizon: 6,
            feature_dim: 3,
            keys,
            values: Array2::from_shape_fn((5, 6), |(i, j)| (i * 10 + j) as f64 / 7.0),
            raw_x: raw.then(|| Array2::from_shape_fn((5, 4), |(i, j)| (i + j) as f64 * 0.1)),
            start_indices: vec![0, 9, 18, 27, 36],
            encoder_hash: "abc".into(),
            seed: 42,
            dataset: "synthetic".into(),
        }
    }

    #[test]
    fn bank_bytes_round_trip_and_checksum() {
        for raw in [false, true] {
            let bank = bank_fixture(raw);
            let bytes = bank.to_bytes();
            assert_eq!(&bytes[..4], b"GMB1");
            assert_eq!(MemoryBank::from_bytes(&bytes).unwrap(), bank);
            let truncated = &bytes[..bytes.len() - 9];
            assert!(matches!(
                MemoryBank::from_bytes(truncated),
                Err(PfrpError::Checksum { .. })
            ));
            let mut flipped = bytes.clone();
            flipped[40] ^= 0x10;
            assert!(matches!(
                MemoryBank::from_bytes(&flipped),
                Err(PfrpError::Checksum { .. })
            ));
            let mut v2 = bytes.clone();
            v2[3] = b'2';
            assert!(matches!(MemoryBank::from_bytes(&v2), Err(PfrpError::Version(_))));
        }
    }

    #[test]
    fn slicing() {
        let y: Vec<f64> = (0..720).map(f64::from).collect();
        assert_eq!(slice_horizon(&y, 720).unwrap(), &y[..]);
        assert_eq!(slice_horizon(&y, 96).unwrap(), &y[..96]);
        assert!(slice_horizon(&y, 721).is_err());
    }

    #[test]
    fn benchmark_defaults() {
        assert_eq!(default_bank_size("Traffic"), Some((4000, 10)));
        assert_eq!(default_bank_size("ETTm1"), Some((3000, 200)));
        assert_eq!(default_bank_size("unknown"), None);
    }
}
