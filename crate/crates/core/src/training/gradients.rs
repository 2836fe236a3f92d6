use ndarray::Array2;

use crate::alignment::{AttentionParams, Ffn, FusionParams, ModelParams};

/// One gradient tensor per learnable tensor of [`ModelParams`], same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub attention: AttentionParams,
    pub fusion: FusionParams,
}

impl GradientSet {
    pub fn zeros_like(p: &ModelParams) -> Self {
        let dim = p.dim();
        Self {
            attention: AttentionParams {
                wq: Array2::zeros((dim, dim)),
                wk: Array2::zeros((dim, dim)),
                wv: Array2::zeros((dim, dim)),
                heads: p.attention.heads,
            },
            fusion: FusionParams {
                coarse: p.fusion.coarse.zeros_like(),
                fine: p.fusion.fine.zeros_like(),
            },
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Flat named views over the learnable tensors, in a fixed order.
pub trait TensorSet {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;
}

fn ffn_views<'a>(prefix: &str, ffn: &'a Ffn, out: &mut Vec<(String, &'a [f64])>) {
    for (i, layer) in ffn.layers.iter().enumerate() {
        out.push((
            format!("{prefix}.{i}.weight"),
            layer.weight.as_slice().expect("standard layout"),
        ));
        out.push((
            format!("{prefix}.{i}.bias"),
            layer.bias.as_slice().expect("standard layout"),
        ));
    }
}

fn ffn_views_mut<'a>(prefix: &str, ffn: &'a mut Ffn, out: &mut Vec<(String, &'a mut [f64])>) {
    for (i, layer) in ffn.layers.iter_mut().enumerate() {
        out.push((
            format!("{prefix}.{i}.weight"),
            layer.weight.as_slice_mut().expect("standard layout"),
        ));
        out.push((
            format!("{prefix}.{i}.bias"),
            layer.bias.as_slice_mut().expect("standard layout"),
        ));
    }
}

fn views<'a>(att: &'a AttentionParams, fusion: &'a FusionParams) -> Vec<(String, &'a [f64])> {
    let mut out = vec![
        (
            "attention.wq".to_string(),
            att.wq.as_slice().expect("standard layout"),
        ),
        (
            "attention.wk".to_string(),
            att.wk.as_slice().expect("standard layout"),
        ),
        (
            "attention.wv".to_string(),
            att.wv.as_slice().expect("standard layout"),
        ),
    ];
    ffn_views("fusion.coarse", &fusion.coarse, &mut out);
    ffn_views("fusion.fine", &fusion.fine, &mut out);
    out
}

fn views_mut<'a>(
    att: &'a mut AttentionParams,
    fusion: &'a mut FusionParams,
) -> Vec<(String, &'a mut [f64])> {
    let mut out = vec![
        (
            "attention.wq".to_string(),
            att.wq.as_slice_mut().expect("standard layout"),
        ),
        (
            "attention.wk".to_string(),
            att.wk.as_slice_mut().expect("standard layout"),
        ),
        (
            "attention.wv".to_string(),
            att.wv.as_slice_mut().expect("standard layout"),
        ),
    ];
    ffn_views_mut("fusion.coarse", &mut fusion.coarse, &mut out);
    ffn_views_mut("fusion.fine", &mut fusion.fine, &mut out);
    out
}

impl TensorSet for ModelParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        views(&self.attention, &self.fusion)
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        views_mut(&mut self.attention, &mut self.fusion)
    }
}

impl TensorSet for GradientSet {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        views(&self.attention, &self.fusion)
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        views_mut(&mut self.attention, &mut self.fusion)
    }
}

/// Tensor names and lengths; two sets are compatible when these agree.
pub fn layout<T: TensorSet>(t: &T) -> Vec<(String, usize)> {
    t.tensors().into_iter().map(|(n, s)| (n, s.len())).collect()
}
