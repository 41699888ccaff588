//! Receptive-field radius of a layer graph, by propagating index intervals
//! from one output pixel back to the input along every path.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfNode {
    Input,
    /// Odd square kernel, stride 1, padding k/2.
    Conv {
        k: usize,
        from: usize,
    },
    MaxPool2 {
        from: usize,
    },
    Upsample2 {
        from: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    /// Elementwise (relu, sigmoid); does not widen the field.
    Pointwise {
        from: usize,
    },
}

/// A layer DAG; nodes refer only to earlier nodes and the last node is the output.
#[derive(Debug, Clone, Default)]
pub struct RfGraph {
    nodes: Vec<RfNode>,
}

impl RfGraph {
    pub fn new() -> Self {
        let mut g = RfGraph { nodes: Vec::new() };
        g.nodes.push(RfNode::Input);
        g
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn push(&mut self, node: RfNode) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn conv(&mut self, from: usize, k: usize) -> usize {
        self.push(RfNode::Conv { k, from })
    }

    pub fn pool(&mut self, from: usize) -> usize {
        self.push(RfNode::MaxPool2 { from })
    }

    pub fn upsample(&mut self, from: usize) -> usize {
        self.push(RfNode::Upsample2 { from })
    }

    pub fn concat(&mut self, a: usize, b: usize) -> usize {
        self.push(RfNode::Concat { a, b })
    }

    fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let refs: &[usize] = match node {
                RfNode::Input => &[],
                RfNode::Conv { k, from } => {
                    if k % 2 == 0 {
                        return Err(Error::Config(format!("unsupported even kernel {k}")));
                    }
                    std::slice::from_ref(from)
                }
                RfNode::MaxPool2 { from }
                | RfNode::Upsample2 { from }
                | RfNode::Pointwise { from } => std::slice::from_ref(from),
                RfNode::Concat { a, b } => {
                    if *a >= i || *b >= i {
                        return Err(Error::Config(format!("node {i} refers forward")));
                    }
                    &[]
                }
            };
            if refs.iter().any(|&r| r >= i) {
                return Err(Error::Config(format!("node {i} refers forward")));
            }
        }
        Ok(())
    }

    /// Input interval (1-D, unbounded extent) that node `n`'s cells `[lo, hi]` depend on.
    fn deps(&self, n: usize, lo: i64, hi: i64) -> (i64, i64) {
        match self.nodes[n] {
            RfNode::Input => (lo, hi),
            RfNode::Conv { k, from } => {
                let r = (k / 2) as i64;
                self.deps(from, lo - r, hi + r)
            }
            RfNode::MaxPool2 { from } => self.deps(from, 2 * lo, 2 * hi + 1),
            RfNode::Upsample2 { from } => {
                // fine j reads coarse floor((2j - 1) / 4) and the next cell
                let lo_c = (2 * lo - 1).div_euclid(4);
                let hi_c = (2 * hi - 1).div_euclid(4) + 1;
                self.deps(from, lo_c, hi_c)
            }
            RfNode::Concat { a, b } => {
                let (la, ha) = self.deps(a, lo, hi);
                let (lb, hb) = self.deps(b, lo, hi);
                (la.min(lb), ha.max(hb))
            }
            RfNode::Pointwise { from } => self.deps(from, lo, hi),
        }
    }

    fn pools(&self) -> u32 {
        self.nodes
            .iter()
            .filter(|n| matches!(n, RfNode::MaxPool2 { .. }))
            .count() as u32
    }

    /// Largest distance (per axis) from an output pixel to any input pixel it depends on.
    pub fn radius(&self) -> Result<usize> {
        self.validate()?;
        let out = self.nodes.len() - 1;
        // dependency pattern is periodic with the total pooling factor
        let period = 1i64 << self.pools().min(20);
        let base = 1i64 << 24;
        let mut radius = 0i64;
        for x in base..base + period {
            let (lo, hi) = self.deps(out, x, x);
            radius = radius.max(x - lo).max(hi - x);
        }
        Ok(radius as usize)
    }
}
