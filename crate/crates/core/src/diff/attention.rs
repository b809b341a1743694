//! Self-attention over spatial positions with a zero-initialized residual gate.

use super::graph::{Graph, Var};

/// Query/key width is the channel count divided by this factor.
pub const QK_REDUCTION: usize = 8;

/// Bound parameters of one attention block for `C` input channels.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `[C, C/8]`
    pub wq: Var,
    /// `[C/8]`
    pub bq: Var,
    /// `[C, C/8]`
    pub wk: Var,
    /// `[C/8]`
    pub bk: Var,
    /// `[C, C]`
    pub wv: Var,
    /// `[C]`
    pub bv: Var,
    /// `[1]`
    pub gamma: Var,
}

impl Graph {
    /// `y = x + gamma * softmax(q k^T) v` on an NHWC tensor, with every spatial
    /// position attending to every other. Returns the output and the `[N, HW, HW]`
    /// attention weights (rows indexed by query position).
    pub fn self_attention(&mut self, x: Var, p: &AttentionVars) -> (Var, Var) {
        let (n, h, w, c) = self.value(x).dims4();
        assert!(
            c % QK_REDUCTION == 0,
            "self-attention needs channels divisible by {QK_REDUCTION}, got {c}"
        );
        let hw = h * w;
        let ck = c / QK_REDUCTION;
        let flat = self.reshape(x, &[n * hw, c]);
        let project = |g: &mut Graph, wt: Var, b: Var, width: usize| {
            let y = g.matmul(flat, wt, false, false);
            let y = g.add_bias(y, b);
            g.reshape(y, &[n, hw, width])
        };
        let q = project(self, p.wq, p.bq, ck);
        let k = project(self, p.wk, p.bk, ck);
        let v = project(self, p.wv, p.bv, c);
        let scores = self.bmm(q, k, false, true);
        let attn = self.softmax_last(scores);
        let o = self.bmm(attn, v, false, false);
        let o = self.reshape(o, &[n, h, w, c]);
        let gated = self.scale_by(o, p.gamma);
        (self.add(x, gated), attn)
    }
}
