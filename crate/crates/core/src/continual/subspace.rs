//! Layer-wise shared subspace: common matrices and per-task projections.

use crate::adapters::TensorFile;
use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor};

/// Fresh-entry standard deviation (matches adapter initialization).
const INIT_STD: f64 = 0.02;

/// Per-slot common matrices (one per adapted projection) and per-task
/// projection matrices. Slot order matches the denoiser's adapter slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SharedSubspace {
    /// `common[slot]`: the `[a, b]` shared matrix.
    pub common: Vec<Tensor>,
    /// `proj[task][slot]`: the `[a, a]` projection for task `task + 1`.
    pub proj: Vec<Vec<Tensor>>,
}

impl SharedSubspace {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_initialized(&self) -> bool {
        !self.common.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.proj.len()
    }

    /// Creates any missing state for the first `tasks` tasks: the common
    /// matrices on first use, then one projection set per task, all
    /// seeded N(0, 0.02^2). Existing entries persist untouched.
    pub fn ensure(&mut self, tasks: usize, slots: usize, dim: usize, rng: &mut Rng) {
        if self.common.is_empty() {
            self.common =
                (0..slots).map(|_| rng.normal_tensor_scaled(&[dim, dim], INIT_STD)).collect();
        }
        while self.proj.len() < tasks {
            self.proj.push(
                (0..slots).map(|_| rng.normal_tensor_scaled(&[dim, dim], INIT_STD)).collect(),
            );
        }
    }

    /// `delta - H_i W` for one task and slot.
    pub fn residual(&self, task: usize, slot: usize, delta: &Tensor) -> Result<Tensor> {
        let h = self
            .proj
            .get(task)
            .and_then(|p| p.get(slot))
            .ok_or_else(|| Error::State(format!("no projection for task {} slot {slot}", task + 1)))?;
        let w = self
            .common
            .get(slot)
            .ok_or_else(|| Error::State(format!("no common matrix for slot {slot}")))?;
        delta.sub(&h.matmul(w)?)
    }

    /// One descent pass of the closed-form subspace updates over every
    /// task in `deltas` and every slot.
    ///
    /// Per slot: each projection moves first, using gradients taken at
    /// the pre-step common matrix
    /// (`dR2/dH_i = -2 (delta_i - H_i W) W^T`), then the common matrix
    /// moves using gradients at the updated projections
    /// (`dR2/dW = -2 sum_i H_i^T (delta_i - H_i W)`). Updates are descent
    /// steps `X := X - eta * dR2/dX`.
    pub fn step(&mut self, deltas: &[Vec<Tensor>], eta: f64) -> Result<()> {
        if !(eta > 0.0) {
            return Err(Error::Config(format!("subspace step rate must be positive, got {eta}")));
        }
        if deltas.len() > self.proj.len() {
            return Err(Error::State(format!(
                "subspace holds {} tasks, got deltas for {}",
                self.proj.len(),
                deltas.len()
            )));
        }
        for slot in 0..self.common.len() {
            let w_pre = self.common[slot].clone();
            let wt = w_pre.transpose()?;

            for (task, task_deltas) in deltas.iter().enumerate() {
                let h = &self.proj[task][slot];
                let resid = task_deltas[slot].sub(&h.matmul(&w_pre)?)?;
                let grad_h = resid.matmul(&wt)?.scale(-2.0);
                if !grad_h.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite projection gradient at task {} slot {slot}",
                        task + 1
                    )));
                }
                self.proj[task][slot] = h.sub(&grad_h.scale(eta))?;
            }

            let mut grad_w = Tensor::zeros(w_pre.shape());
            for (task, task_deltas) in deltas.iter().enumerate() {
                let h = &self.proj[task][slot];
                let resid = task_deltas[slot].sub(&h.matmul(&w_pre)?)?;
                grad_w = grad_w.add(&h.transpose()?.matmul(&resid)?.scale(-2.0))?;
            }
            if !grad_w.is_finite() {
                return Err(Error::Numeric(format!("non-finite common gradient at slot {slot}")));
            }
            self.common[slot] = w_pre.sub(&grad_w.scale(eta))?;
        }
        Ok(())
    }

    /// Serializes into the adapters container format.
    pub fn to_file(&self, config_hash: &str) -> TensorFile {
        let meta = format!(
            "version = 1\nkind = \"subspace\"\nconfig_hash = \"{config_hash}\"\ntasks = {}\nslots = {}\n",
            self.proj.len(),
            self.common.len()
        );
        let mut file = TensorFile::new(meta);
        for (s, w) in self.common.iter().enumerate() {
            file.push(format!("common.slot{s}"), w.clone());
        }
        for (i, task) in self.proj.iter().enumerate() {
            for (s, h) in task.iter().enumerate() {
                file.push(format!("task{}.slot{s}", i + 1), h.clone());
            }
        }
        file
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Meta {
            kind: String,
            tasks: usize,
            slots: usize,
        }
        let meta: Meta = toml::from_str(&file.meta)
            .map_err(|e| Error::Integrity(format!("subspace meta: {e}")))?;
        if meta.kind != "subspace" {
            return Err(Error::Integrity(format!("expected a subspace file, got {:?}", meta.kind)));
        }
        let mut common = Vec::with_capacity(meta.slots);
        for s in 0..meta.slots {
            common.push(file.tensor(&format!("common.slot{s}"))?.clone());
        }
        let mut proj = Vec::with_capacity(meta.tasks);
        for i in 0..meta.tasks {
            let mut task = Vec::with_capacity(meta.slots);
            for s in 0..meta.slots {
                task.push(file.tensor(&format!("task{}.slot{s}", i + 1))?.clone());
            }
            proj.push(task);
        }
        Ok(Self { common, proj })
    }
}
