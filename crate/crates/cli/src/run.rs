use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use reconv::blocks::{client_inference, run_inference, server_inference, InferenceResult};
use reconv::compare::ComparisonKind;
use reconv::cost::{analytic_text, compare_report, measurements, preset_network, PRESETS};
use reconv::counters::OpCounters;
use reconv::model::{demo_input, demo_network, encode_input, parse_model, ring_plan, write_model};
use reconv::netadapt::{compile_plan, ExecutionPlan, LayerSpec};
use reconv::phe::Party;
use reconv::ring::{fixed_decode, prng, ProtocolParams, RingTensor};
use reconv::runtime::{connect, PairConfig};
use reconv::transport::TcpConn;
use reconv::Error;

use crate::{Common, Compare, Failure, ModelArgs, PartyArgs, Phe, Transport};

pub const DEMO_SEED: u64 = 7;
const DEMO_GAIN: f64 = 3.0;
const DEMO_FRAC_BITS: u32 = 8;
const DIAL_TIMEOUT: Duration = Duration::from_secs(20);

pub struct Network {
    pub shape: Vec<usize>,
    pub plan: ExecutionPlan,
    pub frac_bits: u32,
    pub has_weights: bool,
}

pub fn load(args: &ModelArgs) -> Result<Network, Failure> {
    let Some(path) = &args.model else {
        let (shape, layers) = demo_network(&mut prng(DEMO_SEED, "demo"), DEMO_GAIN);
        let plan = compile_plan(&shape, &layers)?;
        return Ok(Network { shape, plan, frac_bits: DEMO_FRAC_BITS, has_weights: true });
    };
    let text = std::fs::read_to_string(path)?;
    let blob = args.weights.as_ref().map(std::fs::read).transpose()?;
    let model = parse_model(&text, blob.as_deref())?;
    Ok(Network {
        plan: model.plan()?,
        shape: model.input_shape.clone(),
        frac_bits: model.frac_bits,
        has_weights: model.has_weights(),
    })
}

fn read_input(path: &Path, len: usize) -> Result<Vec<f64>, Failure> {
    let text = std::fs::read_to_string(path)?;
    let values = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| Error::Malformed(format!("input value {t:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != len {
        return Err(Error::Shape(format!("input has {} values, the model takes {len}", values.len())).into());
    }
    Ok(values)
}

pub fn generated_input(seed: u64, shape: &[usize]) -> Vec<f64> {
    let mut rng = prng(seed, "input");
    if shape == [1, 28, 28] {
        demo_input(&mut rng)
    } else {
        (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(0.0..1.0)).collect()
    }
}

fn client_input(args: &PartyArgs, net: &Network, params: &ProtocolParams) -> Result<RingTensor, Failure> {
    let len = net.shape.iter().product();
    let x = match &args.input {
        Some(path) => read_input(path, len)?,
        None => generated_input(args.common.seed.unwrap_or_else(rand::random), &net.shape),
    };
    Ok(encode_input(&x, &net.shape, params)?)
}

fn dial(addr: &str) -> Result<TcpStream, Failure> {
    let deadline = Instant::now() + DIAL_TIMEOUT;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline && e.kind() == std::io::ErrorKind::ConnectionRefused => {
                std::thread::sleep(Duration::from_millis(50))
            }
            Err(e) => return Err(e.into()),
        }
    }
}

pub fn party(role: Party, args: &PartyArgs, addr: &str) -> Result<(), Failure> {
    let net = load(&args.model)?;
    let params = args.common.params(net.frac_bits)?;
    let default_compare = match args.transport {
        Transport::Tcp => Compare::Ot,
        Transport::Loopback => Compare::Ideal,
    };
    let compare = args.common.compare_or(default_compare);
    if args.transport == Transport::Tcp && compare.kind == ComparisonKind::Ideal {
        return Err(Failure::Usage("the ideal comparison backend needs a shared dealer; use --transport loopback".into()));
    }
    let needs_weights = role == Party::Server || args.transport == Transport::Loopback;
    if needs_weights && !net.has_weights {
        return Err(Failure::Usage("running the server needs --weights".into()));
    }
    let mut cfg = PairConfig::new(params.clone(), args.common.phe_or(Phe::Lattice), compare);
    cfg.plan_digest = net.plan.digest();
    let rp = ring_plan(&net.plan, &params)?;

    let started = Instant::now();
    let result = match (args.transport, role) {
        (Transport::Loopback, _) => {
            let x = client_input(args, &net, &params)?;
            let (c, s) = run_inference(&cfg, &rp.public_view(), &rp, &x)?;
            if role == Party::Client {
                c
            } else {
                s
            }
        }
        (Transport::Tcp, Party::Server) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            let (stream, peer) = listener.accept()?;
            eprintln!("client {peer}");
            let mut rt = connect(Box::new(TcpConn::new(stream)?), Party::Server, &cfg, None)?;
            server_inference(&mut rt, &rp)?
        }
        (Transport::Tcp, Party::Client) => {
            let x = client_input(args, &net, &params)?;
            let stream = dial(addr)?;
            let mut rt = connect(Box::new(TcpConn::new(stream)?), Party::Client, &cfg, None)?;
            client_inference(&mut rt, &rp.public_view(), &x)?
        }
    };
    print_result(&result, &params);
    for b in &result.blocks {
        eprintln!("block {} {}: {:.1} ms", b.index, b.kind, b.elapsed.as_secs_f64() * 1e3);
    }
    eprintln!("total: {:.1} ms", started.elapsed().as_secs_f64() * 1e3);
    Ok(())
}

fn counter_row(label: &str, kind: &str, c: &OpCounters, half_rounds: Option<usize>) -> String {
    let rounds = half_rounds.map_or("-".to_string(), |h| h.to_string());
    format!(
        "{label:>6} {kind:<9} {:>6} {:>6} {:>6} {:>6} {:>4} {:>6} {:>6} {:>6} {:>4} {:>6} {:>10} {:>6}",
        c.enc,
        c.mul_plain,
        c.dec,
        c.add,
        c.rot,
        c.ciphertexts_sent,
        c.drelu_elements,
        c.comp_calls,
        c.mux_calls,
        c.messages_sent,
        c.bytes_sent,
        rounds
    )
}

fn print_result(r: &InferenceResult, params: &ProtocolParams) {
    if let Some(class) = r.class {
        println!("class {class}");
    }
    if let Some(out) = &r.output {
        let values: Vec<String> = out.data.iter().map(|&v| format!("{:.4}", fixed_decode(v, out.scale, params.p))).collect();
        println!("output [{}]", values.join(", "));
    }
    println!(
        "{:>6} {:<9} {:>6} {:>6} {:>6} {:>6} {:>4} {:>6} {:>6} {:>6} {:>4} {:>6} {:>10} {:>6}",
        "block", "kind", "enc", "mult", "dec", "add", "rot", "ct", "drelu", "cmp", "mux", "msgs", "bytes", "hr"
    );
    for b in &r.blocks {
        println!("{}", counter_row(&b.index.to_string(), b.kind, &b.cost, Some(b.half_rounds)));
    }
    println!("{}", counter_row("online", "", &r.online, None));
    println!("{}", counter_row("setup", "", &r.offline, None));
}

fn check_preset(name: &str) -> Result<Vec<&'static str>, Failure> {
    if name == "all" {
        return Ok(PRESETS.to_vec());
    }
    match PRESETS.iter().find(|p| **p == name) {
        Some(p) => Ok(vec![*p]),
        None => Err(Failure::Usage(format!("unknown preset {name:?}; expected all or one of {}", PRESETS.join(", ")))),
    }
}

fn preset_plans(name: &str, common: &Common) -> Result<Vec<(String, Vec<usize>, ExecutionPlan)>, Failure> {
    let mut rng = prng(common.seed.unwrap_or(0), name);
    let mut out = Vec::new();
    for after_relu in [false, true] {
        let (shape, layers): (Vec<usize>, Vec<LayerSpec>) = preset_network(name, common.n, after_relu, &mut rng)?;
        let form = if after_relu { "after-relu" } else { "on-input" };
        let plan = compile_plan(&shape, &layers)?;
        out.push((format!("{name} {form}"), shape, plan));
    }
    Ok(out)
}

pub fn bench(preset: &str, csv: bool, common: &Common) -> Result<(), Failure> {
    let names = check_preset(preset)?;
    let params = common.params(DEMO_FRAC_BITS)?;
    let cfg = PairConfig::new(params.clone(), common.phe_or(Phe::Counting), common.compare_or(Compare::Ideal));
    if csv {
        println!("preset,form,block,kind,source,rounds,enc,mult,dec,add,rot,ciphertexts,comparisons,messages,bytes");
    }
    let mut failed = Vec::new();
    for name in names {
        for (label, shape, plan) in preset_plans(name, common)? {
            let rp = ring_plan(&plan, &params)?;
            let x = encode_input(&generated_input(common.seed.unwrap_or(0), &shape), &shape, &params)?;
            let started = Instant::now();
            let (c, s) = run_inference(&cfg, &rp.public_view(), &rp, &x)?;
            eprintln!("{label}: {:.1} ms", started.elapsed().as_secs_f64() * 1e3);
            let report = compare_report(&measurements(&c, &s)?, &rp)?;
            if csv {
                let prefix = label.replace(' ', ",");
                for row in report.to_csv()?.lines().skip(1) {
                    println!("{prefix},{row}");
                }
            } else {
                println!("== {label}");
                print!("{}", report.to_text());
            }
            if !report.ok() {
                failed.push(label);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("measured counts differ from the closed forms for {}", failed.join(", "))))
    }
}

pub fn cost(model: &ModelArgs, preset: Option<&str>, common: &Common) -> Result<(), Failure> {
    let plans = match preset {
        Some(name) => {
            let mut plans = Vec::new();
            for n in check_preset(name)? {
                plans.extend(preset_plans(n, common)?.into_iter().map(|(label, _, plan)| (label, plan, DEMO_FRAC_BITS)));
            }
            plans
        }
        None => {
            let net = load(model)?;
            vec![("network".to_string(), net.plan, net.frac_bits)]
        }
    };
    for (label, plan, f) in plans {
        let params = common.params(f)?;
        println!("== {label}");
        print!("{}", analytic_text(&ring_plan(&plan, &params)?));
    }
    Ok(())
}

pub fn demo_model(model: &PathBuf, weights: &PathBuf, f: u32, net_seed: u64) -> Result<(), Failure> {
    let (shape, layers) = demo_network(&mut prng(net_seed, "demo"), DEMO_GAIN);
    let (text, blob) = write_model(&shape, f, &layers)?;
    std::fs::write(model, &text)?;
    std::fs::write(weights, &blob)?;
    let parsed = parse_model(&text, Some(&blob))?;
    println!("wrote {} and {}", model.display(), weights.display());
    println!("content hash {}", hex::encode(parsed.content_hash));
    println!("plan digest {}", hex::encode(parsed.plan()?.digest()));
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_files_accept_commas_and_whitespace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        std::fs::write(&path, "0.5, 1\n-2\t3e-1").unwrap();
        assert_eq!(read_input(&path, 4).unwrap(), vec![0.5, 1.0, -2.0, 0.3]);
        assert!(matches!(read_input(&path, 5), Err(Failure::Core(Error::Shape(_)))));
        std::fs::write(&path, "1 two").unwrap();
        assert!(matches!(read_input(&path, 2), Err(Failure::Core(Error::Malformed(_)))));
    }

    #[test]
    fn presets_resolve() {
        assert_eq!(check_preset("all").unwrap().len(), PRESETS.len());
        assert_eq!(check_preset("t3r4").unwrap(), vec!["t3r4"]);
        assert!(matches!(check_preset("t3r0"), Err(Failure::Usage(_))));
    }
}
