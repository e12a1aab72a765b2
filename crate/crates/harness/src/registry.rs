//! Named expert-routing variants for the routing ablation.
//!
//! Each variant is a config transform selected by name at runtime; the
//! ablation runner enumerates exactly these five.

use std::collections::BTreeSet;

use rfrp_core::moe::MoeConfig;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub struct MoeVariant {
    pub name: &'static str,
    apply: fn(&mut ExperimentConfig),
}

impl MoeVariant {
    pub fn configure(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        (self.apply)(&mut cfg);
        cfg
    }
}

/// The five routing variants, in reporting order.
pub fn moe_variants() -> &'static [MoeVariant] {
    &[
        MoeVariant {
            name: "no-expert",
            apply: |cfg| {
                cfg.encoder.moe_layer_indices = BTreeSet::new();
            },
        },
        MoeVariant {
            name: "top1",
            apply: |cfg| {
                cfg.encoder.moe = MoeConfig { num_experts: 3, shared_experts: 0, top_k: 1 };
            },
        },
        MoeVariant {
            name: "top2",
            apply: |cfg| {
                cfg.encoder.moe = MoeConfig { num_experts: 3, shared_experts: 0, top_k: 2 };
            },
        },
        MoeVariant {
            name: "shared-top1",
            apply: |cfg| {
                cfg.encoder.moe = MoeConfig { num_experts: 4, shared_experts: 1, top_k: 1 };
            },
        },
        MoeVariant {
            name: "shared-top2",
            apply: |cfg| {
                cfg.encoder.moe = MoeConfig { num_experts: 4, shared_experts: 1, top_k: 2 };
            },
        },
    ]
}

pub fn variant_by_name(name: &str) -> Result<&'static MoeVariant> {
    moe_variants()
        .iter()
        .find(|v| v.name == name)
        .ok_or_else(|| HarnessError::InvalidArgument(format!("unknown routing variant {name}")))
}
