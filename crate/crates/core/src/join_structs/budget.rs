//! Partition of the total memory budget across the join components.

use crate::error::{Error, Result};
use crate::master_store::MASTER_RECORD_WIDTH;
use crate::stream_source::STREAM_RECORD_WIDTH;

pub const V_R: u64 = MASTER_RECORD_WIDTH as u64;
pub const V_S: u64 = STREAM_RECORD_WIDTH as u64;
pub const QUEUE_ENTRY_BYTES: u64 = 4;
pub const DEFAULT_FUDGE: u64 = 8;
pub const MB: u64 = 1 << 20;
/// Roughly 1 MB of cached master records.
pub const DEFAULT_CACHE_RECORDS: u64 = 8_738;
pub const DEFAULT_PARTITION_RECORDS: u64 = 850;
pub const DEFAULT_IB_BYTES: u64 = 2 * MB;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alpha {
    /// Split so that H_S and Q hold the same number of entries.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetRequest {
    pub total_bytes: u64,
    pub d_b: u64,
    pub n_disk_buffers: u64,
    pub h_r: u64,
    pub i_b_bytes: u64,
    pub alpha: Alpha,
    pub fudge: u64,
}

impl BudgetRequest {
    pub fn new(total_bytes: u64, d_b: u64, n_disk_buffers: u64, h_r: u64, i_b_bytes: u64) -> Self {
        Self {
            total_bytes,
            d_b,
            n_disk_buffers,
            h_r,
            i_b_bytes,
            alpha: Alpha::Auto,
            fudge: DEFAULT_FUDGE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryBudget {
    pub total_bytes: u64,
    pub d_b: u64,
    pub n_disk_buffers: u64,
    pub h_r: u64,
    /// I_B capacity in records.
    pub i_b: u64,
    pub alpha: f64,
    /// H_S capacity in records.
    pub h_s: u64,
    /// Q capacity in entries.
    pub q_cap: u64,
    pub fudge: u64,
}

impl MemoryBudget {
    pub fn disk_buffer_bytes(&self) -> u64 {
        self.n_disk_buffers * self.d_b * V_R
    }

    pub fn cache_bytes(&self) -> u64 {
        self.h_r * V_R
    }

    pub fn ib_bytes(&self) -> u64 {
        self.i_b * V_S
    }

    pub fn hs_bytes(&self) -> u64 {
        self.h_s * self.fudge * V_S
    }

    pub fn queue_bytes(&self) -> u64 {
        self.q_cap * QUEUE_ENTRY_BYTES
    }

    /// Memory left for H_S and Q.
    pub fn remainder(&self) -> u64 {
        self.total_bytes - self.disk_buffer_bytes() - self.cache_bytes() - self.ib_bytes()
    }

    pub fn slack(&self) -> u64 {
        self.remainder() - self.hs_bytes() - self.queue_bytes()
    }

    /// Usable stream-store capacity: every H_S record needs one Q entry.
    pub fn stream_capacity(&self) -> usize {
        self.h_s.min(self.q_cap) as usize
    }
}

pub fn plan_budget(req: &BudgetRequest) -> Result<MemoryBudget> {
    if req.total_bytes == 0 {
        return Err(Error::Domain("total memory must be positive".into()));
    }
    if req.d_b == 0 {
        return Err(Error::Domain("disk buffer must hold at least one record".into()));
    }
    if !(1..=2).contains(&req.n_disk_buffers) {
        return Err(Error::Domain(format!("{} disk buffers (expected 1 or 2)", req.n_disk_buffers)));
    }
    if req.fudge == 0 {
        return Err(Error::Domain("fudge factor must be positive".into()));
    }
    let i_b = req.i_b_bytes / V_S;
    let components: [(&'static str, u64); 3] = [
        ("disk buffers", req.n_disk_buffers * req.d_b * V_R),
        ("H_R", req.h_r * V_R),
        ("I_B", i_b * V_S),
    ];
    let mut available = req.total_bytes;
    for (component, needed) in components {
        if needed >= available {
            return Err(Error::InsufficientMemory {
                component,
                needed,
                available,
            });
        }
        available -= needed;
    }
    let remainder = available;
    let per_hs = req.fudge * V_S;
    let per_pair = per_hs + QUEUE_ENTRY_BYTES;
    let (alpha, h_s, q_cap) = match req.alpha {
        Alpha::Auto => {
            let n = remainder / per_pair;
            (per_hs as f64 / per_pair as f64, n, n)
        }
        Alpha::Fixed(a) => {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Domain(format!("alpha {a} outside (0, 1)")));
            }
            let hs_share = ((a * remainder as f64).floor() as u64).min(remainder);
            let q_share = remainder - hs_share;
            (a, hs_share / per_hs, q_share / QUEUE_ENTRY_BYTES)
        }
    };
    if h_s == 0 || q_cap == 0 {
        return Err(Error::InsufficientMemory {
            component: if h_s == 0 { "H_S" } else { "Q" },
            needed: per_pair,
            available: remainder,
        });
    }
    Ok(MemoryBudget {
        total_bytes: req.total_bytes,
        d_b: req.d_b,
        n_disk_buffers: req.n_disk_buffers,
        h_r: req.h_r,
        i_b,
        alpha,
        h_s,
        q_cap,
        fudge: req.fudge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn component_arithmetic() {
        let b = plan_budget(&BudgetRequest::new(50 * MB, 850, 1, 8_738, 2 * MB)).unwrap();
        assert_eq!(b.disk_buffer_bytes(), 102_000);
        assert_eq!(b.i_b, 104_857);
        assert_eq!(b.h_s, 299_884);
        assert_eq!(b.q_cap, 299_884);
        assert!(b.slack() < 164);
        let op = plan_budget(&BudgetRequest::new(50 * MB, 850, 2, 8_738, 2 * MB)).unwrap();
        assert_eq!(op.disk_buffer_bytes(), 204_000);
    }

    #[test]
    fn overflow_names_component() {
        let err = plan_budget(&BudgetRequest::new(MB, 850, 1, 10_000, 0)).unwrap_err();
        assert!(matches!(err, Error::InsufficientMemory { component: "H_R", .. }), "{err}");
        let err = plan_budget(&BudgetRequest::new(MB, 850, 1, 10, 2 * MB)).unwrap_err();
        assert!(matches!(err, Error::InsufficientMemory { component: "I_B", .. }));
    }

    #[test]
    fn fixed_alpha_respects_split() {
        let mut req = BudgetRequest::new(10 * MB, 850, 1, 1000, MB);
        req.alpha = Alpha::Fixed(0.5);
        let b = plan_budget(&req).unwrap();
        let rem = b.remainder() as f64;
        assert!(b.hs_bytes() as f64 <= 0.5 * rem);
        assert!(b.queue_bytes() as f64 <= 0.5 * rem + 1.0);
        assert!(b.q_cap > b.h_s);
        assert_eq!(b.stream_capacity() as u64, b.h_s);
        req.alpha = Alpha::Fixed(1.0);
        assert!(plan_budget(&req).is_err());
    }

    proptest! {
        #[test]
        fn budget_closes(
            total in 1u64..(512 * MB),
            d_b in 1u64..5_000,
            n in 1u64..=2,
            h_r in 0u64..50_000,
            ib in 0u64..(16 * MB),
            alpha in prop::option::of(0.01f64..0.99),
        ) {
            let mut req = BudgetRequest::new(total, d_b, n, h_r, ib);
            if let Some(a) = alpha {
                req.alpha = Alpha::Fixed(a);
            }
            if let Ok(b) = plan_budget(&req) {
                let sum = b.disk_buffer_bytes() + b.cache_bytes() + b.ib_bytes() + b.hs_bytes() + b.queue_bytes();
                prop_assert_eq!(sum + b.slack(), total);
                prop_assert!(b.slack() < 164);
            }
        }
    }
}
