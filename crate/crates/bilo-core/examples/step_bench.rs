//! Micro-benchmark for one residual-pass forward/backward on a
//! Fisher-KPP-sized problem (51x51 collocation grid, 2x128 tanh network,
//! 12 carried jet components). Run with:
//!
//!     cargo run --release -p bilo-core --example step_bench

use std::sync::Arc;
use std::time::Instant;

use bilo_core::jet::{self, Dir, Jet, Label, SeedConfig};
use bilo_core::net::NetworkParams;
use bilo_core::tape::{Tape, UnaryOp};

fn main() {
    let width = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(128usize);
    let n = 51usize;
    let mut xs = Vec::with_capacity(n * n);
    let mut ts = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            xs.push(i as f64 / (n - 1) as f64);
            ts.push(j as f64 / (n - 1) as f64);
        }
    }
    let cfg: Arc<SeedConfig> = SeedConfig::new(
        2,
        2,
        &[
            Label::c2(0, 0).with_param(0),
            Label::c2(0, 0).with_param(1),
            Label::c1(1).with_param(0),
            Label::c1(1).with_param(1),
        ],
    );
    println!("components: {}", cfg.len());
    let net = NetworkParams::init(1, 2, 2, width, 2);
    let mut tape = Tape::new();
    let mut best = f64::MAX;
    for rep in 0..8 {
        let t0 = Instant::now();
        tape.reset();
        let bound = net.bind(&mut tape);
        let xv = tape.input(&xs);
        let tv = tape.input(&ts);
        let dv = tape.leaf(&[1.0]);
        let rv = tape.leaf(&[1.0]);
        let x = Jet::lift(&mut tape, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let t = Jet::lift(&mut tape, &cfg, tv, Dir::Coord(1), 1.0).unwrap();
        let d = Jet::lift(&mut tape, &cfg, dv, Dir::Param(0), 1.0).unwrap();
        let r = Jet::lift(&mut tape, &cfg, rv, Dir::Param(1), 1.0).unwrap();
        let u = bound.forward_jet(&mut tape, &cfg, &[x, t], &[d, r]).unwrap();
        let fwd = t0.elapsed();
        // crude residual-ish scalars touching all the expensive components
        let uxx = u.comp(&Label::c2(0, 0)).unwrap();
        let ut = u.comp(&Label::c1(1)).unwrap();
        let diff = tape.sub(ut, uxx).unwrap();
        let sq = tape.unary(UnaryOp::Square, diff).unwrap();
        let mut loss = tape.mean(sq).unwrap();
        for k in 0..2u8 {
            let a = u.comp(&Label::c2(0, 0).with_param(k)).unwrap();
            let b = u.comp(&Label::c1(1).with_param(k)).unwrap();
            let g = tape.sub(b, a).unwrap();
            let gs = tape.unary(UnaryOp::Square, g).unwrap();
            let gm = tape.mean(gs).unwrap();
            let gw = tape.affine(0.001, gm, 0.0).unwrap();
            loss = tape.add(loss, gw).unwrap();
        }
        let t1 = Instant::now();
        let grads = tape.backward(loss).unwrap();
        let bwd = t1.elapsed();
        let total = t0.elapsed();
        best = best.min(total.as_secs_f64());
        if rep == 7 {
            println!(
                "ops {} slots {} arena {:.0} MB grad_blocks {}",
                tape.num_ops(),
                tape.num_slots(),
                (tape.arena_len() * 8) as f64 / 1e6,
                grads.len()
            );
            println!(
                "fwd {:.1} ms  bwd {:.1} ms  total {:.1} ms (best {:.1} ms)",
                fwd.as_secs_f64() * 1e3,
                bwd.as_secs_f64() * 1e3,
                total.as_secs_f64() * 1e3,
                best * 1e3
            );
        }
    }
}
