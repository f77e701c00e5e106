//! Codebook: nearest-neighbour quantization and EMA dictionary updates.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K×L dictionary plus its EMA statistics, kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    floor: f64,
    vectors: Vec<f64>,
    counts: Vec<f64>,
    sums: Vec<f64>,
}

/// h×w grid of codebook indices in raster order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentCode {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u32>,
}

impl LatentCode {
    pub fn new(h: usize, w: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != h * w {
            return Err(Error::shape(format!("{} indices", h * w), indices.len()));
        }
        Ok(Self { h, w, indices })
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= k) {
            Some(&t) => Err(Error::Vocabulary { token: t as usize, vocab: k }),
            None => Ok(()),
        }
    }

    /// Fraction of positions at which two codes differ.
    pub fn hamming(&self, other: &LatentCode) -> f64 {
        let diff = self.indices.iter().zip(&other.indices).filter(|(a, b)| a != b).count();
        diff as f64 / self.indices.len().max(1) as f64
    }
}

impl Codebook {
    /// Codebook from explicit vectors (row-major K×L) with N_i = 1, m_i = e_i.
    pub fn from_vectors(k: usize, dim: usize, vectors: Vec<f64>, floor: f64) -> Result<Self> {
        if k < 2 || dim == 0 {
            return Err(Error::Config(format!("codebook needs K >= 2 and L >= 1, got K={k} L={dim}")));
        }
        if vectors.len() != k * dim {
            return Err(Error::shape(format!("{k}x{dim} codebook"), vectors.len()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("codebook entries must be finite".into()));
        }
        Ok(Self { k, dim, floor, sums: vectors.clone(), vectors, counts: vec![1.0; k] })
    }

    pub fn random<R: Rng>(k: usize, dim: usize, floor: f64, rng: &mut R) -> Result<Self> {
        let v = (0..k * dim).map(|_| rng.random_range(-1.0..1.0) / (dim as f64).sqrt()).collect();
        Self::from_vectors(k, dim, v, floor)
    }

    /// Restores a codebook from its three state arrays.
    pub fn from_state(k: usize, dim: usize, floor: f64, vectors: Vec<f64>, counts: Vec<f64>, sums: Vec<f64>) -> Result<Self> {
        let mut c = Self::from_vectors(k, dim, vectors, floor)?;
        if counts.len() != k || sums.len() != k * dim {
            return Err(Error::shape(format!("{k} counts and {k}x{dim} sums"), format!("{} and {}", counts.len(), sums.len())));
        }
        c.counts = counts;
        c.sums = sums;
        Ok(c)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().chain(&self.counts).chain(&self.sums).all(|v| v.is_finite())
    }

    /// Resets entry `i` to `v` with N_i = 1 and m_i = v.
    pub fn set_entry(&mut self, i: usize, v: &[f64]) {
        let r = i * self.dim..(i + 1) * self.dim;
        self.vectors[r.clone()].copy_from_slice(v);
        self.sums[r].copy_from_slice(v);
        self.counts[i] = 1.0;
    }

    /// K×L tensor of the current vectors.
    pub fn tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.vectors.clone(), (self.k, self.dim), device)?.to_dtype(dtype)?)
    }

    fn exact_dist(&self, cell: &[f64], i: usize) -> f64 {
        cell.iter().zip(self.entry(i)).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Nearest entry for each row of `cells` (n×L, row-major), ties to the
    /// lowest index.
    ///
    /// Candidates are ranked with one matmul of expanded distances
    /// ‖e‖² − 2⟨z, e⟩; every entry within a rounding margin of the best score
    /// is then re-scored with exact f64 squared distances.
    pub fn quantize(&self, cells: &[f64]) -> Result<Vec<u32>> {
        if cells.len() % self.dim != 0 {
            return Err(Error::shape(format!("rows of {}", self.dim), cells.len()));
        }
        let n = cells.len() / self.dim;
        if n == 0 {
            return Ok(vec![]);
        }
        let dev = Device::Cpu;
        let z = Tensor::from_slice(cells, (n, self.dim), &dev)?.to_dtype(DType::F32)?;
        let e = self.tensor(DType::F32, &dev)?;
        let scores: Vec<Vec<f32>> = z.matmul(&e.t()?)?.to_vec2()?;
        let norms: Vec<f64> = (0..self.k).map(|i| self.entry(i).iter().map(|v| v * v).sum()).collect();
        let max_norm = norms.iter().cloned().fold(0.0, f64::max);

        let mut out = Vec::with_capacity(n);
        let mut shortlist = Vec::new();
        for (r, row) in scores.iter().enumerate() {
            let cell = &cells[r * self.dim..(r + 1) * self.dim];
            let zn: f64 = cell.iter().map(|v| v * v).sum();
            let approx: Vec<f64> = row.iter().zip(&norms).map(|(&s, &en)| en - 2.0 * s as f64).collect();
            let best = approx.iter().cloned().fold(f64::INFINITY, f64::min);
            let margin = 1e-4 * (zn + max_norm) + 1e-7;
            shortlist.clear();
            shortlist.extend((0..self.k).filter(|&i| approx[i] <= best + margin));
            let mut pick = (f64::INFINITY, 0usize);
            for &i in &shortlist {
                let d = self.exact_dist(cell, i);
                if d < pick.0 {
                    pick = (d, i);
                }
            }
            if !pick.0.is_finite() {
                pick.1 = self.scan(cell);
            }
            out.push(pick.1 as u32);
        }
        Ok(out)
    }

    /// Exhaustive exact scan for one cell.
    fn scan(&self, cell: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.k {
            let d = self.exact_dist(cell, i);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Vectors for a list of indices, row-major.
    pub fn lookup(&self, indices: &[u32]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i as usize >= self.k {
                return Err(Error::Vocabulary { token: i as usize, vocab: self.k });
            }
            out.extend_from_slice(self.entry(i as usize));
        }
        Ok(out)
    }

    /// One EMA step with `cells[r]` assigned to entry `assign[r]`:
    /// N_i ← γN_i + (1−γ)n_i, m_i ← γm_i + (1−γ)Σz, e_i ← m_i / max(N_i, floor).
    pub fn ema_update(&mut self, cells: &[f64], assign: &[u32], gamma: f64) -> Result<()> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("EMA decay must be in [0, 1), got {gamma}")));
        }
        if cells.len() != assign.len() * self.dim {
            return Err(Error::shape(format!("{} cells of dim {}", assign.len(), self.dim), cells.len()));
        }
        let mut n = vec![0.0f64; self.k];
        let mut s = vec![0.0f64; self.k * self.dim];
        for (r, &i) in assign.iter().enumerate() {
            let i = i as usize;
            if i >= self.k {
                return Err(Error::Vocabulary { token: i, vocab: self.k });
            }
            n[i] += 1.0;
            for (acc, v) in s[i * self.dim..(i + 1) * self.dim].iter_mut().zip(&cells[r * self.dim..(r + 1) * self.dim]) {
                *acc += v;
            }
        }
        for i in 0..self.k {
            self.counts[i] = gamma * self.counts[i] + (1.0 - gamma) * n[i];
            let denom = self.counts[i].max(self.floor);
            for j in i * self.dim..(i + 1) * self.dim {
                self.sums[j] = gamma * self.sums[j] + (1.0 - gamma) * s[j];
                self.vectors[j] = self.sums[j] / denom;
            }
        }
        Ok(())
    }

    /// Fraction of entries that appear in `assign`.
    pub fn usage(&self, assign: &[u32]) -> f64 {
        let mut seen = vec![false; self.k];
        for &i in assign {
            seen[i as usize] = true;
        }
        seen.iter().filter(|&&b| b).count() as f64 / self.k as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    fn brute(cb: &Codebook, cell: &[f64]) -> u32 {
        let mut best = (f64::INFINITY, 0u32);
        for k in 0..cb.k() {
            let d: f64 = cell.iter().zip(cb.entry(k)).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, k as u32);
            }
        }
        best.1
    }

    #[test]
    fn exact_match_selects_entry() {
        let mut rng = seed::rng(1);
        let cb = Codebook::random(16, 4, 1e-5, &mut rng).unwrap();
        let cell = cb.entry(5).to_vec();
        assert_eq!(cb.quantize(&cell).unwrap(), vec![5]);
        assert_eq!(cb.lookup(&[5]).unwrap(), cell);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Codebook::from_vectors(3, 1, vec![1.0, -1.0, 1.0], 1e-5).unwrap();
        assert_eq!(cb.quantize(&[0.0, 1.0]).unwrap(), vec![0, 0]);
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = seed::rng(2);
        let cb = Codebook::random(32, 8, 1e-5, &mut rng).unwrap();
        let cells: Vec<f64> = (0..8 * 50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let idx = cb.quantize(&cells).unwrap();
        assert_eq!(cb.quantize(&cb.lookup(&idx).unwrap()).unwrap(), idx);
    }

    #[test]
    fn ema_hand_case() {
        let mut cb = Codebook::from_vectors(2, 2, vec![1.0, 0.0, 0.0, 5.0], 1e-5).unwrap();
        cb.ema_update(&[3.0, 0.0], &[0], 0.5).unwrap();
        assert_eq!(cb.counts()[0], 1.0);
        assert_eq!(&cb.sums()[0..2], &[2.0, 0.0]);
        assert_eq!(cb.entry(0), &[2.0, 0.0]);
    }

    #[test]
    fn ema_gamma_zero_is_batch_mean() {
        let mut cb = Codebook::from_vectors(2, 2, vec![1.0, 1.0, -1.0, -1.0], 1e-5).unwrap();
        cb.ema_update(&[0.25, -0.75], &[1], 0.0).unwrap();
        assert_eq!(cb.entry(1), &[0.25, -0.75]);
        assert_eq!(cb.entry(0), &[0.0, 0.0]);
    }

    #[test]
    fn ema_without_assignments_keeps_vectors() {
        let mut rng = seed::rng(3);
        let mut cb = Codebook::random(8, 3, 1e-5, &mut rng).unwrap();
        let before = cb.vectors().to_vec();
        for _ in 0..10 {
            cb.ema_update(&[], &[], 0.9).unwrap();
        }
        for (a, b) in cb.vectors().iter().zip(&before) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn ema_rejects_bad_decay() {
        let mut cb = Codebook::from_vectors(2, 1, vec![0.0, 1.0], 1e-5).unwrap();
        assert!(cb.ema_update(&[], &[], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn quantize_matches_scan(k in 2usize..40, dim in 1usize..12, seed_ in any::<u64>()) {
            let mut rng = seed::rng(seed_);
            let cb = Codebook::random(k, dim, 1e-5, &mut rng).unwrap();
            let cells: Vec<f64> = (0..dim * 20).map(|_| rng.random_range(-2.0..2.0)).collect();
            let idx = cb.quantize(&cells).unwrap();
            for (r, &i) in idx.iter().enumerate() {
                prop_assert_eq!(i, brute(&cb, &cells[r * dim..(r + 1) * dim]));
            }
        }

        #[test]
        fn ema_keeps_shape_and_finiteness(seed_ in any::<u64>(), gamma in 0.0f64..0.999) {
            let mut rng = seed::rng(seed_);
            let mut cb = Codebook::random(6, 3, 1e-5, &mut rng).unwrap();
            for _ in 0..20 {
                let cells: Vec<f64> = (0..3 * 10).map(|_| rng.random_range(-3.0..3.0)).collect();
                let idx = cb.quantize(&cells).unwrap();
                cb.ema_update(&cells, &idx, gamma).unwrap();
                prop_assert!(cb.is_finite());
                prop_assert_eq!(cb.vectors().len(), 18);
                prop_assert!(cb.counts().iter().all(|&c| c >= 0.0));
                for i in 0..6 {
                    let d = cb.counts()[i].max(cb.floor());
                    for j in 0..3 {
                        prop_assert_eq!(cb.entry(i)[j], cb.sums()[i * 3 + j] / d);
                    }
                }
            }
        }
    }
}
