use std::time::Instant;

use reconv::blocks::{run_inference, InferenceResult};
use reconv::compare::{ComparisonBackend, ComparisonKind};
use reconv::cost::{compare_report, measurements};
use reconv::model::{encode_input, oracle_block, ring_plan, RingPlan};
use reconv::phe::BackendKind;
use reconv::ring::{add_mod, from_signed, prng, signed_rep, sub_mod, ProtocolParams, RingTensor};
use reconv::runtime::{run_pair, PairConfig, Runtime};
use reconv::share::share;
use reconv::triplet::{client_terms, h9_plain, server_terms};

use crate::run::{generated_input, load};
use crate::{Common, Compare, Failure, ModelArgs, Phe};

type Check = Result<String, String>;

struct Tally {
    failed: usize,
}

impl Tally {
    fn record(&mut self, name: &str, outcome: Check) {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
}

pub fn run(model: &ModelArgs, common: &Common, trials: usize, inject_fault: bool) -> Result<(), Failure> {
    let net = load(model)?;
    if !net.has_weights {
        return Err(Failure::Usage("verify runs the server and needs --weights".into()));
    }
    let params = common.params(net.frac_bits)?;
    let compare = common.compare_or(Compare::Ideal);
    let cfg = PairConfig::new(params.clone(), common.phe_or(Phe::Lattice), compare);
    let plan = ring_plan(&net.plan, &params)?;
    let mut server_plan = plan.clone();
    if inject_fault {
        perturb(&mut server_plan)?;
    }

    let mut tally = Tally { failed: 0 };
    tally.record("relu identity", relu_identity());

    let base_seed = common.seed.unwrap_or(0);
    let mut first = None;
    let mut detail = Ok(String::new());
    for t in 0..trials {
        let x = encode_input(&generated_input(base_seed.wrapping_add(t as u64), &net.shape), &net.shape, &params)?;
        let started = Instant::now();
        let (c, s) = run_inference(&cfg, &plan.public_view(), &server_plan, &x)?;
        eprintln!("trial {t}: {:.1} ms", started.elapsed().as_secs_f64() * 1e3);
        if let Err(e) = against_oracle(&plan, &x, &c, &s) {
            detail = Err(format!("trial {t}: {e}"));
            break;
        }
        first.get_or_insert((c, s));
    }
    tally.record(
        "blocks match the oracle",
        detail.map(|_| format!("{trials} inferences, {} blocks each, exact before truncation, within one ulp after", plan.blocks.len())),
    );

    if let Some((c, s)) = &first {
        let report = compare_report(&measurements(c, s)?, &plan)?;
        let mismatches: Vec<String> = report.mismatches.iter().map(|m| format!("block {} {}", m.block, m.field)).collect();
        tally.record(
            "counts match the closed forms",
            if report.ok() {
                Ok(format!("{} linear blocks", report.rows.iter().filter(|r| r.expected.is_some()).count()))
            } else {
                Err(mismatches.join(", "))
            },
        );
        let (mut rot, mut mux) = (0, 0);
        for (bc, bs) in c.blocks.iter().zip(&s.blocks) {
            let both = bc.cost.plus(&bs.cost);
            rot += both.rot;
            if matches!(bc.kind, "iConv" | "ReConv" | "ReFC") {
                mux += both.mux_calls;
            }
        }
        tally.record(
            "no rotations, no multiplexer in linear blocks",
            if rot == 0 && mux == 0 {
                Ok("0 rotations, 0 multiplexer calls".into())
            } else {
                Err(format!("{rot} rotations, {mux} multiplexer calls"))
            },
        );
    }

    if compare.kind == ComparisonKind::Ot {
        tally.record("comparisons over OT", comparisons(compare).map_err(|e| e.to_string()).and_then(|r| r));
    }

    if tally.failed == 0 {
        println!("verify ok");
        Ok(())
    } else {
        Err(Failure::Verify(format!("{} check(s) failed", tally.failed)))
    }
}

/// Shift the first linear block's first bias entry by one unit at the
/// product scale, which changes every pre-truncation value of channel 0.
fn perturb(plan: &mut RingPlan) -> Result<(), Failure> {
    let p = plan.params.p;
    let lin = plan.blocks.iter_mut().find_map(|b| match b {
        reconv::model::RingBlock::IConv(l) | reconv::model::RingBlock::ReConv(l) | reconv::model::RingBlock::ReFc(l) => {
            Some(l)
        }
        _ => None,
    });
    match lin {
        Some(l) => {
            l.bias.data[0] = add_mod(l.bias.data[0], 1, p);
            Ok(())
        }
        None => Err(Failure::Usage("the network has no linear block to perturb".into())),
    }
}

fn against_oracle(plan: &RingPlan, x: &RingTensor, c: &InferenceResult, s: &InferenceResult) -> Result<(), String> {
    let p = x.modulus;
    let mut input = x.clone();
    for (i, block) in plan.blocks.iter().enumerate() {
        let want = oracle_block(block, &input).map_err(|e| e.to_string())?;
        let (bc, bs) = (&c.blocks[i], &s.blocks[i]);
        if let (Some(pc), Some(ps), Some(w)) = (&bc.pre_trunc, &bs.pre_trunc, &want.pre_trunc) {
            let got = pc.add(ps).map_err(|e| e.to_string())?;
            if let Some(j) = got.data.iter().zip(&w.data).position(|(a, b)| a != b) {
                return Err(format!(
                    "block {i} {} element {j} before truncation: {} vs {}",
                    block.name(),
                    signed_rep(got.data[j], p),
                    signed_rep(w.data[j], p)
                ));
            }
        }
        if block.name() == "tArgMax" {
            if bc.class != want.class {
                return Err(format!("block {i} class {:?} vs {:?}", bc.class, want.class));
            }
            continue;
        }
        let got = bc.output.add(&bs.output).map_err(|e| e.to_string())?;
        for (j, (g, w)) in got.data.iter().zip(&want.output.data).enumerate() {
            let d = signed_rep(*g, p) - signed_rep(*w, p);
            if !(0..=1).contains(&d) {
                return Err(format!("block {i} {} element {j}: off by {d}", block.name()));
            }
        }
        input = got.with_scale(want.output.scale);
    }
    Ok(())
}

/// ReLU(a) = h6 + r + h9 for every input, split, mask and client bit at p = 17.
fn relu_identity() -> Check {
    let p = 17;
    let mut cases = 0;
    for a in 0..p {
        for split in 0..p {
            for r in 0..p {
                for bc in [false, true] {
                    cases += 1;
                    let bs = bc ^ (signed_rep(a, p) >= 0);
                    let (h1, h2, h5) = client_terms(&[split], &[bc], &[r], p);
                    let (h3, h4, h6) = server_terms(&[sub_mod(a, split, p)], &[bs], p);
                    let h9 = h9_plain(h1[0], h2[0], h3[0], h4[0], h5[0], p);
                    let got = add_mod(add_mod(h6[0], r, p), h9, p);
                    let want = if signed_rep(a, p) >= 0 { a } else { 0 };
                    if got != want {
                        return Err(format!("a={a} split={split} r={r} client bit={bc}: got {got}"));
                    }
                }
            }
        }
    }
    Ok(format!("{cases} cases at p=17"))
}

fn split(vals: &[u64], p: u64) -> (Vec<u64>, Vec<u64>) {
    let t = RingTensor::new(&[vals.len()], vals.to_vec(), p).expect("shape matches data");
    let s = share(&t, &mut prng(99, "verify"));
    (s.client.data, s.server.data)
}

fn on_pair<T: Send>(
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

/// Exhaustive DReLU and signed max at p = 257.
fn comparisons(backend: ComparisonBackend) -> reconv::Result<Check> {
    let p = 257;
    let vals: Vec<u64> = (0..p).collect();
    let (xc, xs) = split(&vals, p);
    let (c, s) = on_pair(backend, xc, xs, |rt, x| rt.drelu(x, None))?;
    for (v, (a, b)) in vals.iter().zip(c.iter().zip(&s)) {
        if (a ^ b) != (signed_rep(*v, p) >= 0) {
            return Ok(Err(format!("DReLU({})", signed_rep(*v, p))));
        }
    }
    let (mut xv, mut yv) = (Vec::new(), Vec::new());
    for a in -19..=20 {
        for b in -19..=20 {
            xv.push(from_signed(a, p));
            yv.push(from_signed(b, p));
        }
    }
    let n = xv.len();
    let (xc, xs) = split(&[xv.clone(), yv.clone()].concat(), p);
    let (c, s) = on_pair(backend, xc, xs, |rt, v| rt.comp_max(&v[..n], &v[n..]))?;
    for i in 0..n {
        let want = signed_rep(xv[i], p).max(signed_rep(yv[i], p));
        if signed_rep(add_mod(c[i], s[i], p), p) != want {
            return Ok(Err(format!("max({}, {})", signed_rep(xv[i], p), signed_rep(yv[i], p))));
        }
    }
    Ok(Ok(format!("DReLU on all {p} values and max over {n} signed pairs at p={p}")))
}
