use crate::error::Result;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Which set of normalization layers a forward pass runs through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormPath {
    Clean,
    Adversarial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the active path's running statistics are updated.
    Train,
    /// Stored running statistics; nothing is written.
    Eval,
}

/// Affine parameters and running statistics of one normalization path.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    writes: u64,
}

impl<S: Scalar> BnStats<S> {
    fn new(channels: usize) -> Self {
        BnStats {
            weight: Tensor::ones(&[channels]).with_grad(),
            bias: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            writes: 0,
        }
    }

    /// Number of running-statistic updates applied to this path.
    pub fn writes(&self) -> u64 {
        self.writes
    }
}

/// Batch normalization with separate clean and adversarial parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBatchNorm<S: Scalar> {
    clean: BnStats<S>,
    adv: BnStats<S>,
    momentum: f64,
    eps: f64,
    active: NormPath,
}

impl<S: Scalar> DualBatchNorm<S> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        assert!(momentum > 0.0 && momentum < 1.0, "momentum must lie in (0, 1)");
        assert!(eps > 0.0, "eps must be positive");
        DualBatchNorm {
            clean: BnStats::new(channels),
            adv: BnStats::new(channels),
            momentum,
            eps,
            active: NormPath::Clean,
        }
    }

    pub fn channels(&self) -> usize {
        self.clean.weight.numel()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn active_path(&self) -> NormPath {
        self.active
    }

    pub fn set_active_path(&mut self, path: NormPath) {
        self.active = path;
    }

    pub fn path(&self, path: NormPath) -> &BnStats<S> {
        match path {
            NormPath::Clean => &self.clean,
            NormPath::Adversarial => &self.adv,
        }
    }

    pub fn path_mut(&mut self, path: NormPath) -> &mut BnStats<S> {
        match path {
            NormPath::Clean => &mut self.clean,
            NormPath::Adversarial => &mut self.adv,
        }
    }

    /// Overwrites the adversarial path with an exact copy of the clean one.
    pub fn copy_clean_to_adversarial(&mut self) {
        let writes = self.adv.writes;
        self.adv = self.clean.clone();
        self.adv.writes = writes;
    }

    pub(crate) fn paths_mut(&mut self) -> (&mut BnStats<S>, &mut BnStats<S>) {
        (&mut self.clean, &mut self.adv)
    }

    /// Normalizes `x` through `path`. `affine` holds the graph handles of that
    /// path's `(weight, bias)`. In train mode the batch statistics are
    /// returned for [`DualBatchNorm::record_batch`].
    pub fn apply(
        &self,
        g: &mut Graph<S>,
        x: Var,
        affine: (Var, Var),
        path: NormPath,
        mode: Mode,
    ) -> Result<(Var, Option<(Vec<S>, Vec<S>, usize)>)> {
        let eps = S::lit(self.eps);
        match mode {
            Mode::Train => {
                let shape = g.shape(x);
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let (y, mean, var) = g.batch_norm_train(x, affine.0, affine.1, eps)?;
                Ok((y, Some((mean, var, count))))
            }
            Mode::Eval => {
                let stats = self.path(path);
                let y = g.batch_norm_eval(
                    x,
                    affine.0,
                    affine.1,
                    stats.running_mean.data(),
                    stats.running_var.data(),
                    eps,
                )?;
                Ok((y, None))
            }
        }
    }

    /// Folds batch statistics into `path`'s running averages. The running
    /// variance uses the unbiased estimate.
    pub fn record_batch(&mut self, path: NormPath, mean: &[S], var: &[S], count: usize) {
        let m = S::lit(self.momentum);
        let keep = S::one() - m;
        let unbias = if count > 1 {
            S::lit(count as f64 / (count - 1) as f64)
        } else {
            S::one()
        };
        let stats = self.path_mut(path);
        for (r, &b) in stats.running_mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in stats.running_var.data_mut().iter_mut().zip(var) {
            *r = keep * *r + m * b * unbias;
        }
        stats.writes += 1;
    }
}
