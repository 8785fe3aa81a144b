//! Exit gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;
use reconv::blocks::{client_inference, run_inference, server_inference, InferenceResult};
use reconv::compare::ComparisonBackend;
use reconv::cost::{compare_report, cost_baseline, cost_iconv, cost_ours, measurements, preset, preset_network, PRESETS};
use reconv::model::{
    demo_input, demo_network, encode_input, infer_float, infer_ring_oracle, oracle_block, oracle_class, ring_maxpool, ring_plan,
    ring_relu, RingBlock, RingPlan,
};
use reconv::netadapt::{compile_plan, swap_pool_relu, BnLayer, ConvLayer, LayerSpec};
use reconv::packing::{
    decode_conv_shares, decode_fc, encode_fc_input, encode_fc_weights, encode_iota, encode_kernel, im2col,
    ConvGeometry, FcGeometry,
};
use reconv::phe::{BackendKind, Ciphertext, Party, PheContext};
use reconv::ring::{add_mod, from_signed, mul_mod, prng, signed_rep, sub_mod, Prng, ProtocolParams, RingTensor};
use reconv::runtime::{run_pair, PairConfig, Runtime};
use reconv::share::share;
use reconv::transport::{Direction, MsgType, TraceEvent};
use reconv::triplet::{client_terms, h9_plain, server_terms};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 9] = [
        ("ReLU identity over the seven terms", 30, relu_identity),
        ("no rotations", 300, no_rotations),
        ("operation counts per block", 300, operation_counts),
        ("no multiplexer after DReLU", 300, no_multiplexer),
        ("end-to-end against the ring oracle", 600, end_to_end),
        ("packed encodings", 120, encodings),
        ("network adaptation equivalences", 300, adaptation),
        ("comparison substrate", 600, comparisons),
        ("PHE backends and noise", 300, phe_backends),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > Duration::from_secs(*limit) => Err(format!("{detail}; took longer than {limit} s")),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {} {name}: {detail} [{:.1} s]", i + 1, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}

// ---------------------------------------------------------------------------
// shared helpers

fn relu_via_terms(a: u64, split: u64, bc: bool, r: u64, p: u64) -> u64 {
    let bs = bc ^ (signed_rep(a, p) >= 0);
    let a_s = sub_mod(a, split, p);
    let (h1, h2, h5) = client_terms(&[split], &[bc], &[r], p);
    let (h3, h4, h6) = server_terms(&[a_s], &[bs], p);
    let h9 = h9_plain(h1[0], h2[0], h3[0], h4[0], h5[0], p);
    add_mod(add_mod(h6[0], r, p), h9, p)
}

fn relu_plain(a: u64, p: u64) -> u64 {
    if signed_rep(a, p) >= 0 {
        a
    } else {
        0
    }
}

/// The largest prime the lattice noise allows, so local truncation almost
/// never wraps, and 8 fraction bits so 1-ulp carries rarely flip a class.
fn e2e_params(seed: u64) -> ProtocolParams {
    ProtocolParams::with_prime_bits(4096, 37, 8).unwrap().with_seed(seed)
}

fn demo_plan(params: &ProtocolParams) -> (Vec<usize>, Vec<LayerSpec>, RingPlan) {
    let (shape, layers) = demo_network(&mut prng(7, "demo"), 3.0);
    let rp = ring_plan(&compile_plan(&shape, &layers).unwrap(), params).unwrap();
    (shape, layers, rp)
}

fn random_input(rng: &mut Prng, shape: &[usize], params: &ProtocolParams) -> RingTensor {
    let x: Vec<f64> = if shape == [1, 28, 28] {
        demo_input(rng)
    } else {
        (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(0.0..1.0)).collect()
    };
    encode_input(&x, shape, params).unwrap()
}

// ---------------------------------------------------------------------------
// 1

fn relu_identity() -> Outcome {
    let p = 17;
    let mut cases = 0;
    for a in 0..p {
        for split in 0..p {
            for r in 0..p {
                for bc in [false, true] {
                    cases += 1;
                    let got = relu_via_terms(a, split, bc, r, p);
                    ensure!(got == relu_plain(a, p), "p=17 a={a} split={split} r={r} b_C={bc}: {got}");
                }
            }
        }
    }
    let p = ProtocolParams::default().p;
    let mut rng = prng(1, "identity");
    let trials = 100_000;
    for _ in 0..trials {
        let (a, split, r, bc) = (rng.gen_range(0..p), rng.gen_range(0..p), rng.gen_range(0..p), rng.gen());
        let got = relu_via_terms(a, split, bc, r, p);
        ensure!(got == relu_plain(a, p), "p={p} a={a} split={split} r={r} b_C={bc}: {got}");
    }
    Ok(format!("{cases} exhaustive cases at p=17 and {trials} random trials at p={p}, zero failures"))
}

// ---------------------------------------------------------------------------
// 2

fn no_rotations() -> Outcome {
    let params = e2e_params(2);
    let (shape, _, rp) = demo_plan(&params);
    let x = random_input(&mut prng(2, "x"), &shape, &params);
    let cfg = PairConfig::new(params, BackendKind::Counting, ComparisonBackend::ideal());
    let (c, s) = run_inference(&cfg, &rp.public_view(), &rp, &x).map_err(|e| e.to_string())?;
    let rot = c.online.plus(&s.online).rot + c.offline.plus(&s.offline).rot;
    ensure!(rot == 0, "demo network performed {rot} rotations");
    let kinds: Vec<&str> = rp.blocks.iter().map(|b| b.name()).collect();
    for k in ["iConv", "ReConv", "ReFC"] {
        ensure!(kinds.contains(&k), "demo network lacks a {k} block");
    }
    let base = cost_baseline(&preset("t3r1", 4096).unwrap(), false).linear.rot;
    ensure!(base >= 39, "baseline rotations for t3r1 are {base}, expected at least 39");
    let demo_base: Vec<u64> = rp
        .blocks
        .iter()
        .filter_map(|b| match b {
            RingBlock::IConv(l) | RingBlock::ReConv(l) => match l.lin {
                reconv::linear::Linear::Conv { geom, .. } => {
                    Some(cost_baseline(&geom, matches!(b, RingBlock::IConv(_))).linear.rot)
                }
                _ => None,
            },
            _ => None,
        })
        .collect();
    Ok(format!("demo network rot 0 over {kinds:?}; baseline rot t3r1 {base}, demo convs {demo_base:?}"))
}

// ---------------------------------------------------------------------------
// 3

fn operation_counts() -> Outcome {
    let params = e2e_params(3);
    let mut rng = prng(3, "presets");
    let mut lines = Vec::new();
    for name in PRESETS {
        let g = preset(name, 4096).map_err(|e| e.to_string())?;
        for after_relu in [false, true] {
            let (shape, layers) = preset_network(name, 4096, after_relu, &mut rng).map_err(|e| e.to_string())?;
            let rp = ring_plan(&compile_plan(&shape, &layers).unwrap(), &params).unwrap();
            let x = random_input(&mut rng, &shape, &params);
            let cfg = PairConfig::new(params.clone(), BackendKind::Counting, ComparisonBackend::ideal());
            let (c, s) = run_inference(&cfg, &rp.public_view(), &rp, &x).map_err(|e| e.to_string())?;
            let report = compare_report(&measurements(&c, &s).unwrap(), &rp).unwrap();
            ensure!(report.ok(), "{name}: {}", report.to_text());
            let got = report.rows.last().unwrap().measured;
            let (sigma, d, c_o) = (g.sigma() as u64, g.d() as u64, g.c_o as u64);
            if after_relu {
                let want = (2 * sigma + d * c_o, sigma + c_o, 2 * sigma + d + d * c_o, c_o);
                ensure!(
                    (got.mult, got.dec, got.add, got.ciphertexts) == want,
                    "{name} ReConv measured {got}, expected mult/dec/add/ct {want:?}"
                );
                ensure!(got == cost_ours(&g).total(), "{name} ReConv {got}");
            } else {
                let want = (d, d * c_o, c_o, d * c_o);
                ensure!(
                    (got.enc, got.mult, got.dec, got.add) == want,
                    "{name} iConv measured {got}, expected enc/mult/dec/add {want:?}"
                );
                ensure!(got == cost_iconv(&g), "{name} iConv {got}");
            }
            lines.push(format!("{name}/{}: {got}", if after_relu { "ReConv" } else { "iConv" }));
        }
    }
    Ok(format!("exact on all ten blocks ({})", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 4

fn post_drelu(trace: &[TraceEvent], block: usize) -> (usize, usize) {
    let mut seen = false;
    let (mut msgs, mut ot) = (0, 0);
    for e in trace {
        match e {
            TraceEvent::Mark { label: "drelu-done", block: Some(b) } if *b == block => seen = true,
            TraceEvent::Message { dir: Direction::Sent, block: Some(b), msg_type, .. } if seen && *b == block => {
                msgs += 1;
                ot += matches!(msg_type, MsgType::OtBase | MsgType::OtExt) as usize;
            }
            _ => {}
        }
    }
    (msgs, ot)
}

fn no_multiplexer() -> Outcome {
    let params = e2e_params(4);
    let (shape, _, rp) = demo_plan(&params);
    let x = random_input(&mut prng(4, "x"), &shape, &params);
    let cfg = PairConfig::new(params, BackendKind::Counting, ComparisonBackend::ot());
    let run = |rt: &mut Runtime, client: bool| -> reconv::Result<(InferenceResult, Vec<TraceEvent>)> {
        let r = if client { client_inference(rt, &rp.public_view(), &x)? } else { server_inference(rt, &rp)? };
        Ok((r, rt.sess.trace().to_vec()))
    };
    let ((c, ct), (s, st)) = run_pair(&cfg, |rt| run(rt, true), |rt| run(rt, false)).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (i, b) in rp.blocks.iter().enumerate() {
        if !matches!(b.name(), "ReConv" | "ReFC" | "iConv") {
            continue;
        }
        let cost = c.blocks[i].cost.plus(&s.blocks[i].cost);
        ensure!(cost.mux_calls == 0, "block {i} {} made {} mux calls", b.name(), cost.mux_calls);
        if b.name() != "iConv" {
            let ((mc, oc), (ms, os)) = (post_drelu(&ct, i), post_drelu(&st, i));
            ensure!(oc + os == 0, "block {i}: {} OT messages after DReLU", oc + os);
            ensure!(mc + ms == 2, "block {i}: {} messages after DReLU", mc + ms);
            checked += 1;
        }
    }
    Ok(format!("0 mux calls in linear blocks; {checked} ReLU blocks each send exactly 2 messages after DReLU, no OT"))
}

// ---------------------------------------------------------------------------
// 5

fn end_to_end() -> Outcome {
    let params = e2e_params(5);
    let (shape, _, rp) = demo_plan(&params);
    let mut rng = prng(5, "inputs");
    let trials = 200;
    let (mut agree, mut classes) = (0, std::collections::BTreeSet::new());
    for t in 0..trials {
        let x = random_input(&mut rng, &shape, &params);
        let cfg = PairConfig::new(params.clone().with_seed(1000 + t), BackendKind::Lattice, ComparisonBackend::ideal());
        let (c, s) = run_inference(&cfg, &rp.public_view(), &rp, &x).map_err(|e| e.to_string())?;
        let mut input = x.clone();
        for (i, block) in rp.blocks.iter().enumerate() {
            let want = oracle_block(block, &input).map_err(|e| e.to_string())?;
            let (bc, bs) = (&c.blocks[i], &s.blocks[i]);
            if let (Some(pc), Some(ps), Some(w)) = (&bc.pre_trunc, &bs.pre_trunc, &want.pre_trunc) {
                ensure!(pc.add(ps).unwrap().data == w.data, "input {t} block {i}: differs from oracle before truncation");
            }
            input = bc.output.add(&bs.output).unwrap().with_scale(want.output.scale);
        }
        let want = oracle_class(&infer_ring_oracle(&rp, &x).unwrap());
        agree += (c.class == want) as usize;
        classes.extend(want);
    }
    ensure!(agree >= 199, "class agreement {agree}/{trials}");
    Ok(format!(
        "lattice backend, every block exact before truncation, class agreement {agree}/{trials} ({} distinct classes)",
        classes.len()
    ))
}

// ---------------------------------------------------------------------------
// 6

fn brute_conv(x: &RingTensor, k: &RingTensor, g: &ConvGeometry, p: u64) -> Vec<u64> {
    let mut out = Vec::with_capacity(g.c_o * g.out_len());
    for b in 0..g.c_o {
        for oy in 0..g.out_h() {
            for ox in 0..g.out_w() {
                let mut acc = 0;
                for c in 0..g.c_i {
                    for ky in 0..g.f_h {
                        for kx in 0..g.f_w {
                            let (y, xx) = ((oy * g.s + ky) as isize - g.pad as isize, (ox * g.s + kx) as isize - g.pad as isize);
                            if y < 0 || xx < 0 || y >= g.h_i as isize || xx >= g.w_i as isize {
                                continue;
                            }
                            let xv = x.data[(c * g.h_i + y as usize) * g.w_i + xx as usize];
                            let kv = k.data[((b * g.c_i + c) * g.f_h + ky) * g.f_w + kx];
                            acc = add_mod(acc, mul_mod(xv, kv, p), p);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn encodings() -> Outcome {
    let p = ProtocolParams::default().p;
    let mut rng = prng(6, "geometries");
    let mut convs = 0;
    while convs < 100 {
        let n = [16, 64, 256, 1024, 4096][rng.gen_range(0..5)];
        let (c_i, h, w, c_o) = (rng.gen_range(1..6), rng.gen_range(1..14), rng.gen_range(1..14), rng.gen_range(1..6));
        let (f_h, f_w, s, pad) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(0..3));
        if f_h > h + 2 * pad || f_w > w + 2 * pad {
            continue;
        }
        let Ok(g) = ConvGeometry::new(n, (c_i, h, w), (c_o, f_h, f_w), s, pad) else { continue };
        ensure!(g.xi() >= 1, "xi < 1 for {g:?}");
        let x = RingTensor::random(&[c_i, h, w], p, &mut rng);
        let k = RingTensor::random(&[c_o, c_i, f_h, f_w], p, &mut rng);
        let iota = encode_iota(&im2col(&x, &g).unwrap(), &g).unwrap().rows;
        let kern = encode_kernel(&k, &g).unwrap();
        let rows: Vec<Vec<u64>> = (0..c_o)
            .map(|b| {
                (0..n)
                    .map(|z| (0..g.d()).fold(0, |acc, j| add_mod(acc, mul_mod(iota[j][z], kern[j][b][z], p), p)))
                    .collect()
            })
            .collect();
        let got = decode_conv_shares(&rows, &g, p).unwrap();
        ensure!(got.data == brute_conv(&x, &k, &g, p), "conv mismatch for {g:?}");
        convs += 1;
    }
    for _ in 0..100 {
        let n = [16, 64, 256, 4096][rng.gen_range(0..4)];
        let n_i = rng.gen_range(1..=n.min(300));
        let n_o = rng.gen_range(1..40);
        let g = FcGeometry::new(n, n_i, n_o).unwrap();
        let a = RingTensor::random(&[n_i], p, &mut rng);
        let wt = RingTensor::random(&[n_o, n_i], p, &mut rng);
        let ar = encode_fc_input(&a.data, &g);
        let rows: Vec<Vec<u64>> = encode_fc_weights(&wt, &g)
            .unwrap()
            .iter()
            .map(|r| r.iter().zip(&ar).map(|(&w, &v)| mul_mod(w, v, p)).collect())
            .collect();
        let got = decode_fc(&rows, &g, p).unwrap();
        let want: Vec<u64> = (0..n_o)
            .map(|b| (0..n_i).fold(0, |acc, i| add_mod(acc, mul_mod(wt.data[b * n_i + i], a.data[i], p), p)))
            .collect();
        ensure!(got.data == want, "FC mismatch for {g:?}");
    }
    Ok("100 random conv geometries and 100 random FC layers equal brute force mod p".into())
}

// ---------------------------------------------------------------------------
// 7

/// Uniform multiples of 1/8 in [-2, 2): representable at 6 fraction bits,
/// with products of two exact at the layer's product scale.
fn dyadic(rng: &mut Prng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-16..16) as f64 / 8.0).collect()
}

fn dyadic_conv(rng: &mut Prng, c_o: usize, c_i: usize, f: usize) -> ConvLayer {
    ConvLayer { c_o, f_h: f, f_w: f, stride: 1, pad: 0, kernel: dyadic(rng, c_o * c_i * f * f), bias: dyadic(rng, c_o) }
}

/// Largest gap between a ring output at scale f and a float reference, in
/// units of 2^-f.
fn ulps(ring: &RingTensor, float: &[f64], f: u32) -> f64 {
    ring.data
        .iter()
        .zip(float)
        .map(|(&r, &x)| (signed_rep(r, ring.modulus) as f64 - x * (1u64 << f) as f64).abs())
        .fold(0.0, f64::max)
}

fn adaptation() -> Outcome {
    let params = e2e_params(7);
    let (p, f) = (params.p, params.f);
    let mut rng = prng(7, "adapt");
    let trials = 1000;

    // MaxPool and ReLU commute, exactly, in the ring.
    for _ in 0..trials {
        let s = rng.gen_range(2..4);
        let shape = [rng.gen_range(1..4), rng.gen_range(1..9), rng.gen_range(1..9)];
        let vals: Vec<i64> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-500..500)).collect();
        let t = RingTensor::from_signed(&shape, &vals, p).unwrap();
        let a = ring_relu(&ring_maxpool(&t, s).unwrap());
        let b = ring_maxpool(&ring_relu(&t), s).unwrap();
        ensure!(a.data == b.data, "ReLU/MaxPool swap differs on {shape:?} s={s}");
    }
    for _ in 0..trials {
        let (s, c, hw) = (rng.gen_range(2..4), rng.gen_range(1..3), rng.gen_range(2..9));
        let seq = [LayerSpec::Relu, LayerSpec::MaxPool { s }, LayerSpec::Conv(dyadic_conv(&mut rng, 2, c, 1))];
        let swapped = swap_pool_relu(&seq);
        ensure!(matches!(swapped[..2], [LayerSpec::MaxPool { .. }, LayerSpec::Relu]), "swap_pool_relu kept the order");
        let x = dyadic(&mut rng, c * hw * hw);
        let (a, b) = (infer_float(&seq, &[c, hw, hw], &x).unwrap(), infer_float(&swapped, &[c, hw, hw], &x).unwrap());
        ensure!(a == b, "swapped sequence differs on {c}x{hw}x{hw} s={s}");
    }

    // BN fused into the preceding conv.
    let (mut bn_worst, mut pool_worst) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (c_i, c_o, hw) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(2..6));
        let conv = dyadic_conv(&mut rng, c_o, c_i, 2.min(hw));
        let bn = BnLayer { channels: c_o, scale: dyadic(&mut rng, c_o), shift: dyadic(&mut rng, c_o) };
        let layers = [LayerSpec::Conv(conv), LayerSpec::Bn(bn)];
        let shape = [c_i, hw, hw];
        let rp = ring_plan(&compile_plan(&shape, &layers).unwrap(), &params).unwrap();
        ensure!(rp.blocks.len() == 1, "BN was not fused");
        let x = dyadic(&mut rng, c_i * hw * hw);
        let ring = oracle_block(&rp.blocks[0], &encode_input(&x, &shape, &params).unwrap()).unwrap();
        let float = infer_float(&layers, &shape, &x).unwrap();
        bn_worst = bn_worst.max(ulps(&ring.output, &float.values, f));
    }
    ensure!(bn_worst < 1.0, "fused BN is {bn_worst} ulp from conv then BN");

    // MeanPool folded into the next conv's kernel.
    for _ in 0..trials {
        let (c, c_o) = (rng.gen_range(1..3), rng.gen_range(1..4));
        let hw = 2 * rng.gen_range(2..4);
        let layers = [
            LayerSpec::Conv(dyadic_conv(&mut rng, c, 1, 1)),
            LayerSpec::Relu,
            LayerSpec::MeanPool { s: 2 },
            LayerSpec::Conv(dyadic_conv(&mut rng, c_o, c, 2)),
        ];
        let rp = ring_plan(&compile_plan(&[1, hw, hw], &layers).unwrap(), &params).unwrap();
        let block = &rp.blocks[1];
        ensure!(matches!(block, RingBlock::ReConv(_)), "MeanPool did not fold into a ReConv");
        let x = dyadic(&mut rng, c * hw * hw);
        let ring = oracle_block(block, &encode_input(&x, &[c, hw, hw], &params).unwrap()).unwrap();
        let float = infer_float(&layers[1..], &[c, hw, hw], &x).unwrap();
        pool_worst = pool_worst.max(ulps(&ring.output, &float.values, f));
    }
    ensure!(pool_worst < 1.0, "folded MeanPool is {pool_worst} ulp off");

    // ReLU comparisons shrink by the pooling area once ReLU follows MaxPool.
    let mut ratios = Vec::new();
    for s in [2usize, 3] {
        let (c, hw) = (3, 6 * s);
        let layers = [
            LayerSpec::Conv(dyadic_conv(&mut rng, c, 1, 1)),
            LayerSpec::Relu,
            LayerSpec::MaxPool { s },
            LayerSpec::Conv(dyadic_conv(&mut rng, 2, c, 1)),
        ];
        let rp = ring_plan(&compile_plan(&[1, hw, hw], &layers).unwrap(), &params).unwrap();
        let x = random_input(&mut rng, &[1, hw, hw], &params);
        let cfg = PairConfig::new(params.clone(), BackendKind::Counting, ComparisonBackend::ideal());
        let (cl, sv) = run_inference(&cfg, &rp.public_view(), &rp, &x).map_err(|e| e.to_string())?;
        let m = measurements(&cl, &sv).unwrap();
        let relu = m.iter().find(|b| b.kind == "ReConv").unwrap().comparisons as f64;
        let ratio = (c * hw * hw) as f64 / relu;
        ensure!((ratio - (s * s) as f64).abs() < 1e-9, "s={s}: ReLU comparison ratio {ratio}");
        let cc = reconv::cost::comp_counts(c, hw, hw, s, true);
        ratios.push(format!("s={s}: ratio {ratio}, total {} -> {}", cc.relu_then_pool, cc.pool_then_relu));
    }
    Ok(format!(
        "swap exact on {trials} ring tensors and {trials} float sequences; fused BN max {bn_worst} ulp; folded MeanPool max {pool_worst} ulp; {}",
        ratios.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 8

fn split(vals: &[u64], p: u64, label: &str) -> (Vec<u64>, Vec<u64>) {
    let t = RingTensor::new(&[vals.len()], vals.to_vec(), p).unwrap();
    let s = share(&t, &mut prng(99, label));
    (s.client.data, s.server.data)
}

fn both<T: Send>(
    backend: ComparisonBackend,
    xc: Vec<u64>,
    xs: Vec<u64>,
    f: impl Fn(&mut Runtime, &[u64]) -> reconv::Result<T> + Sync,
) -> reconv::Result<(T, T)> {
    let cfg = PairConfig::new(ProtocolParams::new(8, 257, 0)?.with_seed(8), BackendKind::Counting, backend);
    run_pair(
        &cfg,
        |rt| {
            rt.sess.finish_offline()?;
            f(rt, &xc)
        },
        |rt| {
            rt.sess.finish_offline()?;
            f(rt, &xs)
        },
    )
}

fn comparisons() -> Outcome {
    let p = 257;
    let trials = 1000;
    let mut rng = prng(8, "cmp");
    for backend in [ComparisonBackend::ideal(), ComparisonBackend::ot()] {
        let name = format!("{backend:?}");
        let vals: Vec<u64> = (0..p).collect();
        let (xc, xs) = split(&vals, p, "drelu");
        let (c, s) = both(backend, xc, xs, |rt, x| rt.drelu(x, None)).map_err(|e| e.to_string())?;
        for (v, (a, b)) in vals.iter().zip(c.iter().zip(&s)) {
            ensure!((a ^ b) == (signed_rep(*v, p) >= 0), "{name}: DReLU({v})");
        }

        let (mut xv, mut yv) = (Vec::new(), Vec::new());
        for a in -19..=20 {
            for b in -19..=20 {
                xv.push(from_signed(a, p));
                yv.push(from_signed(b, p));
            }
        }
        let n = xv.len();
        let (xc, xs) = split(&[xv.clone(), yv.clone()].concat(), p, "max");
        let (c, s) = both(backend, xc, xs, |rt, v| rt.comp_max(&v[..n], &v[n..])).map_err(|e| e.to_string())?;
        for i in 0..n {
            let want = signed_rep(xv[i], p).max(signed_rep(yv[i], p));
            ensure!(signed_rep(add_mod(c[i], s[i], p), p) == want, "{name}: max at pair {i}");
        }

        let groups: Vec<Vec<i64>> = (0..trials).map(|_| (0..9).map(|_| rng.gen_range(-60..=60)).collect()).collect();
        let flat: Vec<u64> = groups.iter().flatten().map(|&v| from_signed(v, p)).collect();
        let (xc, xs) = split(&flat, p, "tree");
        let (c, s) = both(backend, xc, xs, |rt, v| rt.tree_max(&v.chunks(9).map(|g| g.to_vec()).collect::<Vec<_>>()))
            .map_err(|e| e.to_string())?;
        for (t, g) in groups.iter().enumerate() {
            ensure!(signed_rep(add_mod(c[t], s[t], p), p) == *g.iter().max().unwrap(), "{name}: tree max {g:?}");
        }

        let mut logits: Vec<Vec<i64>> = (0..trials).map(|_| (0..10).map(|_| rng.gen_range(-12..=12)).collect()).collect();
        logits[0] = vec![3; 10];
        logits[1] = vec![1, 7, 2, 7, 7, 0, 0, 0, 0, 7];
        let flat: Vec<u64> = logits.iter().flatten().map(|&v| from_signed(v, p)).collect();
        let (xc, xs) = split(&flat, p, "argmax");
        let (c, s) = both(backend, xc, xs, |rt, v| v.chunks(10).map(|l| rt.tree_argmax(l)).collect::<reconv::Result<Vec<_>>>())
            .map_err(|e| e.to_string())?;
        for (l, (got, server)) in logits.iter().zip(c.iter().zip(&s)) {
            let max = *l.iter().max().unwrap();
            let want = l.iter().position(|&v| v == max).unwrap();
            ensure!(*got == Some(want) && server.is_none(), "{name}: argmax of {l:?} gave {got:?}");
        }
    }
    Ok(format!(
        "both backends: DReLU exhaustive at p=257, max over 1600 signed pairs, {trials} tree max and {trials} argmax trials, ties to lowest index"
    ))
}

// ---------------------------------------------------------------------------
// 9

#[derive(Clone)]
struct Slot {
    ct: Ciphertext,
    plain: Vec<u64>,
    multiplied: bool,
}

fn run_program(phe: &PheContext, seed: u64) -> reconv::Result<Vec<Vec<u64>>> {
    let (n, p) = (phe.slots(), phe.p());
    let mut rng = prng(seed, "program");
    let keys = phe.keygen(Party::Server, &mut prng(seed, "keys"));
    let mut enc_rng = prng(seed, "encrypt");
    let mut pool: Vec<Slot> = Vec::new();
    for _ in 0..3 {
        let v: Vec<u64> = (0..n).map(|_| rng.gen_range(0..p)).collect();
        pool.push(Slot { ct: phe.encrypt(&keys.public, &v, &mut enc_rng)?, plain: v, multiplied: false });
    }
    for _ in 0..50 {
        let i = rng.gen_range(0..pool.len());
        let j = rng.gen_range(0..pool.len());
        let w: Vec<u64> = (0..n).map(|_| rng.gen_range(0..p)).collect();
        let (a, b) = (&pool[i], &pool[j]);
        let next = match rng.gen_range(0..5) {
            0 => Slot {
                ct: phe.add(&a.ct, &b.ct)?,
                plain: a.plain.iter().zip(&b.plain).map(|(&x, &y)| add_mod(x, y, p)).collect(),
                multiplied: a.multiplied || b.multiplied,
            },
            1 => Slot {
                ct: phe.sub(&a.ct, &b.ct)?,
                plain: a.plain.iter().zip(&b.plain).map(|(&x, &y)| sub_mod(x, y, p)).collect(),
                multiplied: a.multiplied || b.multiplied,
            },
            2 if !a.multiplied => Slot {
                ct: phe.mul_plain(&a.ct, &w)?,
                plain: a.plain.iter().zip(&w).map(|(&x, &y)| mul_mod(x, y, p)).collect(),
                multiplied: true,
            },
            3 => Slot {
                ct: phe.sub_plain(&a.ct, &w)?,
                plain: a.plain.iter().zip(&w).map(|(&x, &y)| sub_mod(x, y, p)).collect(),
                multiplied: a.multiplied,
            },
            _ => Slot {
                ct: phe.add_plain(&a.ct, &w)?,
                plain: a.plain.iter().zip(&w).map(|(&x, &y)| add_mod(x, y, p)).collect(),
                multiplied: a.multiplied,
            },
        };
        pool.push(next);
    }
    let mut out = Vec::new();
    for s in &pool {
        let d = phe.decrypt(&keys.secret, &s.ct)?;
        if d != s.plain {
            return Err(reconv::Error::Protocol("decryption differs from the plaintext mirror".into()));
        }
        out.push(d);
    }
    Ok(out)
}

/// The longest chain the protocol builds: the client's masked ReLU terms,
/// then the server's conv over d assembled rows.
fn deepest_budget(phe: &PheContext, d: usize) -> reconv::Result<f64> {
    let (n, p) = (phe.slots(), phe.p());
    let mut rng = prng(9, "deep");
    let mut vec = || -> Vec<u64> { (0..n).map(|_| rng.gen_range(0..p)).collect() };
    let (h1, h2, h3, h4, h6, h7, mask) = (vec(), vec(), vec(), vec(), vec(), vec(), vec());
    let h5: Vec<u64> = h1.iter().map(|v| v & 1).collect();
    let kernels: Vec<Vec<u64>> = (0..d).map(|_| vec()).collect();
    let mut krng = prng(10, "deep-keys");
    let server = phe.keygen(Party::Server, &mut krng);
    let client = phe.keygen(Party::Client, &mut krng);

    let ct3 = phe.encrypt(&server.public, &h3, &mut krng)?;
    let ct4 = phe.encrypt(&server.public, &h4, &mut krng)?;
    let ct9 = phe.add_plain(&phe.add(&phe.mul_plain(&ct3, &h2)?, &phe.mul_plain(&ct4, &h5)?)?, &h1)?;
    let mut worst = phe.budget_bits(&ct9);
    let h9 = phe.decrypt(&server.secret, &ct9)?;
    let want9: Vec<u64> = (0..n).map(|z| h9_plain(h1[z], h2[z], h3[z], h4[z], h5[z], p)).collect();
    if h9 != want9 {
        return Err(reconv::Error::Protocol("h9 decrypted wrong".into()));
    }

    let ct7 = phe.encrypt(&client.public, &h7, &mut krng)?;
    let relu: Vec<u64> = (0..n).map(|z| add_mod(h6[z], h9[z], p)).collect();
    let act = phe.add_plain(&ct7, &relu)?;
    let mut acc = phe.mul_plain(&act, &kernels[0])?;
    for k in &kernels[1..] {
        acc = phe.add(&acc, &phe.mul_plain(&act, k)?)?;
    }
    let out = phe.sub_plain(&acc, &mask)?;
    worst = worst.min(phe.budget_bits(&out));
    let got = phe.decrypt(&client.secret, &out)?;
    let a: Vec<u64> = (0..n).map(|z| add_mod(h7[z], relu[z], p)).collect();
    let want: Vec<u64> = (0..n)
        .map(|z| sub_mod(kernels.iter().fold(0, |s, k| add_mod(s, mul_mod(a[z], k[z], p), p)), mask[z], p))
        .collect();
    if got != want {
        return Err(reconv::Error::Protocol("conv output decrypted wrong".into()));
    }
    Ok(worst)
}

fn phe_backends() -> Outcome {
    let params = ProtocolParams::default();
    let lattice = PheContext::new(BackendKind::Lattice, &params).map_err(|e| e.to_string())?;
    let counting = PheContext::new(BackendKind::Counting, &params).map_err(|e| e.to_string())?;
    let programs = 5;
    for seed in 0..programs {
        let a = run_program(&lattice, seed).map_err(|e| format!("lattice program {seed}: {e}"))?;
        let b = run_program(&counting, seed).map_err(|e| format!("counting program {seed}: {e}"))?;
        ensure!(a == b, "program {seed}: backends disagree");
    }
    let d = PRESETS.iter().map(|name| preset(name, params.n).unwrap().d()).max().unwrap();
    let budget = deepest_budget(&lattice, d).map_err(|e| e.to_string())?;
    ensure!(budget > 0.0, "deepest expression leaves {budget:.1} bits");
    Ok(format!(
        "{programs} random 50-op programs agree; deepest expression (d={d}) at n={}, p={} keeps {budget:.1} bits",
        params.n, params.p
    ))
}
