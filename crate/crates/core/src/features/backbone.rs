use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DdadError, Result};
use crate::nn::{Conv2d, Graph, ParamStore, Scalar, Var};

/// Available feature backbones. Both are fully convolutional with three
/// blocks, indexed `1..=3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneKind {
    /// Plain conv/ReLU stack, block strides 2, 4, 8.
    #[serde(rename = "toy-cnn")]
    ToyCnn,
    /// Residual stages behind a stride-2 stem, block strides 4, 8, 16.
    #[serde(rename = "resnet-lite")]
    ResNetLite,
}

impl BackboneKind {
    pub fn id(self) -> &'static str {
        match self {
            Self::ToyCnn => "toy-cnn",
            Self::ResNetLite => "resnet-lite",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "toy-cnn" => Ok(Self::ToyCnn),
            "resnet-lite" => Ok(Self::ResNetLite),
            other => Err(DdadError::InvalidConfig(format!("unknown backbone {other:?} (toy-cnn, resnet-lite)"))),
        }
    }

    pub fn strides(self) -> [usize; 3] {
        match self {
            Self::ToyCnn => [2, 4, 8],
            Self::ResNetLite => [4, 8, 16],
        }
    }

    pub fn channels(self) -> [usize; 3] {
        match self {
            Self::ToyCnn => [16, 32, 64],
            Self::ResNetLite => [32, 64, 128],
        }
    }
}

#[derive(Clone, Debug)]
enum Block {
    Plain { down: Conv2d, conv: Conv2d },
    Residual { down: Conv2d, conv: Conv2d, skip: Conv2d },
}

#[derive(Clone, Debug)]
pub(crate) struct Backbone {
    pub kind: BackboneKind,
    stem: Option<Conv2d>,
    blocks: Vec<Block>,
}

pub const DEPTH: usize = 3;

impl Backbone {
    pub fn build<T: Scalar>(kind: BackboneKind, seed: u64) -> (Self, ParamStore<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let ch = kind.channels();
        let (stem, mut cin) = match kind {
            BackboneKind::ToyCnn => (None, 3),
            BackboneKind::ResNetLite => (Some(Conv2d::new(&mut s, r, "stem", 3, 16, 3, 2, 1)), 16),
        };
        let mut blocks = Vec::new();
        for (j, &c) in ch.iter().enumerate() {
            let name = format!("block{}", j + 1);
            let down = Conv2d::new(&mut s, r, &format!("{name}.down"), cin, c, 3, 2, 1);
            let conv = Conv2d::same3(&mut s, r, &format!("{name}.conv"), c, c);
            blocks.push(match kind {
                BackboneKind::ToyCnn => Block::Plain { down, conv },
                BackboneKind::ResNetLite => {
                    let skip = Conv2d::new(&mut s, r, &format!("{name}.skip"), cin, c, 1, 2, 0);
                    Block::Residual { down, conv, skip }
                }
            });
            cin = c;
        }
        (Self { kind, stem, blocks }, s)
    }

    /// Outputs of blocks `1..=upto`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, upto: usize) -> Vec<Var> {
        let mut h = match &self.stem {
            Some(c) => {
                let h = c.forward(g, x);
                g.relu(h)
            }
            None => x,
        };
        let mut out = Vec::new();
        for block in self.blocks.iter().take(upto) {
            h = match block {
                Block::Plain { down, conv } => {
                    let a = down.forward(g, h);
                    let a = g.relu(a);
                    let a = conv.forward(g, a);
                    g.relu(a)
                }
                Block::Residual { down, conv, skip } => {
                    let a = down.forward(g, h);
                    let a = g.relu(a);
                    let a = conv.forward(g, a);
                    let sk = skip.forward(g, h);
                    let a = g.add(a, sk);
                    g.relu(a)
                }
            };
            out.push(h);
        }
        out
    }
}
