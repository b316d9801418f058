//! Closed-form parameter and FLOP counts.
//!
//! Conventions: a conv costs `2·C_in·C_out·k·H` FLOPs (one multiply-add is
//! two operations) and has `C_in·C_out·k` weights plus either a bias
//! (`C_out`) or batch-norm scale and shift (`2·C_out`). The head costs
//! `2·C·Y` FLOPs and has `C·Y + Y` parameters. Batch norm, ReLU, residual
//! additions and pooling are not counted as FLOPs; running statistics are
//! not parameters. Skipped units cost nothing; adapters are bias-free
//! pointwise convs.

use serde::{Deserialize, Serialize};

use super::spec::{ConvUnitSpec, GatePlan, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

fn conv_cost(cin: usize, cout: usize, k: usize, len: usize, batchnorm: bool, bias: bool) -> Cost {
    let (cin, cout, k, len) = (cin as u64, cout as u64, k as u64, len as u64);
    let extra = if batchnorm {
        2 * cout
    } else if bias {
        cout
    } else {
        0
    };
    Cost {
        params: cin * cout * k + extra,
        flops: 2 * cin * cout * k * len,
    }
}

pub fn unit_cost(unit: &ConvUnitSpec, length: usize) -> Cost {
    let bn = unit.has_batchnorm;
    let mut total = Cost { params: 0, flops: 0 };
    let mut c = unit.in_channels;
    for &k in &unit.kernel_lengths {
        total = total + conv_cost(c, unit.out_channels, k, length, bn, !bn);
        c = unit.out_channels;
    }
    if unit.has_projection() {
        total = total + conv_cost(unit.in_channels, unit.out_channels, 1, length, bn, !bn);
    }
    total
}

/// Params and FLOPs of one forward pass on a single instance of `length`.
pub fn count_params_flops(spec: &NetworkSpec, plan: &GatePlan, length: usize) -> Cost {
    let mut total = Cost { params: 0, flops: 0 };
    for (l, unit) in spec.units.iter().enumerate() {
        if !plan.gate(l) {
            continue;
        }
        if let Some(a) = plan.adapter(l) {
            total = total + conv_cost(a.in_channels, a.out_channels, 1, length, false, false);
        }
        total = total + unit_cost(unit, length);
    }
    let c = plan.output_channels(spec) as u64;
    let y = spec.classes as u64;
    total
        + Cost {
            params: c * y + y,
            flops: 2 * c * y,
        }
}
