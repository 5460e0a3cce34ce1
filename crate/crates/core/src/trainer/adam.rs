/// First and second moment buffers for one parameter group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Rebuilds the buffers for a resized group. `sources[j]` names the old
    /// element copied into new slot group `j` (each group holds `stride`
    /// values); `None` starts fresh at zero.
    pub fn remap(&self, sources: &[Option<usize>], stride: usize) -> Self {
        let mut out = Self::zeros(sources.len() * stride);
        for (j, src) in sources.iter().enumerate() {
            if let Some(i) = src {
                out.m[j * stride..(j + 1) * stride].copy_from_slice(&self.m[i * stride..(i + 1) * stride]);
                out.v[j * stride..(j + 1) * stride].copy_from_slice(&self.v[i * stride..(i + 1) * stride]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam step on `params` for 1-based step count `step`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    lr: f64,
    step: u64,
    hp: &AdamParams,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), moments.m.len());
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}
