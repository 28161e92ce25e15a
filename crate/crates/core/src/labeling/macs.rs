/// Layer shapes that contribute multiply-accumulates.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `rows` inputs through a `d_in → d_out` matrix.
    Linear { rows: usize, d_in: usize, d_out: usize },
    Conv3d { c_in: usize, c_out: usize, kernel: [usize; 3], out: [usize; 3] },
    /// Attention over `edges` messages of width `d_out`: two products for
    /// the score `W_r·[g_b, g_j]` and one for the weighted sum.
    Attention { edges: usize, d_out: usize },
    /// Segment aggregation (mean/max) of `edges` messages of width `d`.
    Aggregate { edges: usize, d: usize },
}

impl Layer {
    pub fn macs(&self) -> u64 {
        match *self {
            Layer::Linear { rows, d_in, d_out } => (rows * d_in * d_out) as u64,
            Layer::Conv3d { c_in, c_out, kernel, out } => {
                (c_out * c_in) as u64 * kernel.iter().product::<usize>() as u64 * out.iter().product::<usize>() as u64
            }
            Layer::Attention { edges, d_out } => (3 * edges * d_out) as u64,
            Layer::Aggregate { edges, d } => (edges * d) as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MacReport {
    pub components: Vec<(String, u64)>,
    pub total: u64,
}

pub fn count_macs(layers: &[(String, Layer)]) -> MacReport {
    let components: Vec<(String, u64)> = layers.iter().map(|(n, l)| (n.clone(), l.macs())).collect();
    let total = components.iter().map(|c| c.1).sum();
    MacReport { components, total }
}
