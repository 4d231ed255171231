//! Named schemes, their per-role block layouts and exact bits-per-weight.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Role;

/// Weights per super-block.
pub const SUPER_BLOCK: usize = 256;
/// Weights per flat block.
pub const FLAT_BLOCK: usize = 32;

/// Physical block layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    /// Raw IEEE binary16 values.
    F16,
    /// 32 signed `bits`-wide codes plus one binary16 scale.
    Flat { bits: u8 },
    /// 256 weights split into `256 / sub_len` sub-blocks. Each sub-block has a
    /// `param_bits` unsigned scale code (and min code when asymmetric) that is
    /// dequantized against binary16 super parameters.
    Super {
        sub_len: u16,
        weight_bits: u8,
        param_bits: u8,
        asymmetric: bool,
    },
}

impl Layout {
    pub fn block_len(&self) -> usize {
        match self {
            Layout::F16 => 1,
            Layout::Flat { .. } => FLAT_BLOCK,
            Layout::Super { .. } => SUPER_BLOCK,
        }
    }

    pub fn sub_blocks(&self) -> usize {
        match *self {
            Layout::Super { sub_len, .. } => SUPER_BLOCK / sub_len as usize,
            _ => 1,
        }
    }

    /// Serialized bits of one block, metadata included.
    pub fn block_bits(&self) -> u64 {
        match *self {
            Layout::F16 => 16,
            Layout::Flat { bits } => FLAT_BLOCK as u64 * bits as u64 + 16,
            Layout::Super {
                weight_bits,
                param_bits,
                asymmetric,
                ..
            } => {
                let per_sub = if asymmetric { 2 } else { 1 };
                SUPER_BLOCK as u64 * weight_bits as u64
                    + self.sub_blocks() as u64 * per_sub * param_bits as u64
                    + 16 * per_sub
            }
        }
    }

    pub fn block_bytes(&self) -> usize {
        debug_assert_eq!(self.block_bits() % 8, 0);
        (self.block_bits() / 8) as usize
    }

    pub fn bpw(&self) -> Ratio<u64> {
        Ratio::new(self.block_bits(), self.block_len() as u64)
    }

    pub fn weight_bits(&self) -> u32 {
        match *self {
            Layout::F16 => 16,
            Layout::Flat { bits } => bits as u32,
            Layout::Super { weight_bits, .. } => weight_bits as u32,
        }
    }

    pub fn param_bits(&self) -> u32 {
        match *self {
            Layout::F16 => 0,
            Layout::Flat { .. } => 16,
            Layout::Super { param_bits, .. } => param_bits as u32,
        }
    }

    pub fn is_asymmetric(&self) -> bool {
        matches!(
            self,
            Layout::Super {
                asymmetric: true,
                ..
            }
        )
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layout::F16 => f.write_str("f16"),
            Layout::Flat { bits } => write!(f, "flat32 sym w{bits}"),
            Layout::Super {
                sub_len,
                weight_bits,
                param_bits,
                asymmetric,
            } => write!(
                f,
                "{}x{} {} w{} p{}",
                sub_len,
                SUPER_BLOCK / sub_len as usize,
                if asymmetric { "asym" } else { "sym" },
                weight_bits,
                param_bits
            ),
        }
    }
}

/// 8 sub-blocks of 32, 6-bit scale and min codes.
const fn asym_8x32(weight_bits: u8) -> Layout {
    Layout::Super {
        sub_len: 32,
        weight_bits,
        param_bits: 6,
        asymmetric: true,
    }
}

/// 6-bit weights, 8-bit sub-block scales, symmetric 16x16.
const HIGH_16X16: Layout = Layout::Super {
    sub_len: 16,
    weight_bits: 6,
    param_bits: 8,
    asymmetric: false,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuantScheme {
    #[serde(rename = "FP16")]
    Fp16,
    #[serde(rename = "Q8_0")]
    Q8_0,
    #[serde(rename = "Q5_0")]
    Q5_0,
    #[serde(rename = "Q4_0")]
    Q4_0,
    #[serde(rename = "Q5_K")]
    Q5K,
    #[serde(rename = "Q4_K")]
    Q4K,
    #[serde(rename = "Q3_K")]
    Q3K,
    #[serde(rename = "Q2_K")]
    Q2K,
}

/// One row of a scheme's role table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleLayout {
    pub role: Role,
    pub standard: Layout,
    /// Layout used by the high-precision half of the role, if the scheme
    /// splits it.
    pub high_precision: Option<Layout>,
}

impl QuantScheme {
    pub const ALL: [QuantScheme; 8] = [
        QuantScheme::Fp16,
        QuantScheme::Q8_0,
        QuantScheme::Q5_0,
        QuantScheme::Q4_0,
        QuantScheme::Q5K,
        QuantScheme::Q4K,
        QuantScheme::Q3K,
        QuantScheme::Q2K,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuantScheme::Fp16 => "FP16",
            QuantScheme::Q8_0 => "Q8_0",
            QuantScheme::Q5_0 => "Q5_0",
            QuantScheme::Q4_0 => "Q4_0",
            QuantScheme::Q5K => "Q5_K",
            QuantScheme::Q4K => "Q4_K",
            QuantScheme::Q3K => "Q3_K",
            QuantScheme::Q2K => "Q2_K",
        }
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&s| s == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Layout for `role`. `high_precision` selects the 6-bit path on the
    /// roles where Q5_K / Q4_K split precision; it is ignored elsewhere.
    pub fn layout(self, role: Role, high_precision: bool) -> Layout {
        use QuantScheme::*;
        use Role::*;
        let split_role = matches!(role, AttentionWv | FeedForwardW2);
        match self {
            Fp16 => Layout::F16,
            Q8_0 => Layout::Flat { bits: 8 },
            Q5_0 => Layout::Flat { bits: 5 },
            Q4_0 => Layout::Flat { bits: 4 },
            Q5K | Q4K if split_role && high_precision => HIGH_16X16,
            Q5K => asym_8x32(5),
            Q4K => asym_8x32(4),
            Q3K => match role {
                AttentionWv | AttentionWo | FeedForwardW2 => asym_8x32(4),
                Other => Layout::Super {
                    sub_len: 16,
                    weight_bits: 3,
                    param_bits: 6,
                    asymmetric: false,
                },
            },
            Q2K => match role {
                AttentionWv | FeedForwardW2 => asym_8x32(4),
                AttentionWo | Other => Layout::Super {
                    sub_len: 16,
                    weight_bits: 2,
                    param_bits: 4,
                    asymmetric: true,
                },
            },
        }
    }

    /// Whether `role` has a distinct high-precision layout in this scheme.
    pub fn splits(self, role: Role) -> bool {
        self.layout(role, true) != self.layout(role, false)
    }

    pub fn role_table(self) -> Vec<RoleLayout> {
        Role::ALL
            .iter()
            .map(|&role| RoleLayout {
                role,
                standard: self.layout(role, false),
                high_precision: self.splits(role).then(|| self.layout(role, true)),
            })
            .collect()
    }

    /// Bits per weight of the standard path for `role`.
    pub fn bpw(self, role: Role) -> Ratio<u64> {
        self.layout(role, false).bpw()
    }
}

/// Bits per weight, metadata included, for the standard path of `role`.
pub fn bpw(scheme: QuantScheme, role: Role) -> Ratio<u64> {
    scheme.bpw(role)
}

/// Layers with an even index take the high-precision path on split roles.
pub fn is_high_precision_layer(layer: Option<usize>) -> bool {
    layer.is_some_and(|l| l % 2 == 0)
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|sc| sc.name() == norm)
            .ok_or_else(|| Error::Scheme(format!("unknown scheme {s:?}")))
    }
}
