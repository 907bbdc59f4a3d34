mod common;

use common::*;
use logtrans::neural::{Arch, CellKind};

#[test]
fn gradients_match_finite_differences() {
    for arch in [Arch::Mc, Arch::Ml, Arch::Ms] {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            for (layers, dropout) in [(1, 0.0), (2, 0.3)] {
                let r = gradient_check(&tiny_config(arch, cell, layers, dropout), 11);
                println!("{arch} {cell} layers {layers} dropout {dropout}: {} params, max rel {:.2e} at {}", r.checked, r.max_rel, r.worst);
                assert!(r.max_rel < FD_TOLERANCE, "{arch} {cell}: {}", r.worst);
            }
        }
    }
}
