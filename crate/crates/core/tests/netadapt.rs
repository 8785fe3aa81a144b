use proptest::prelude::*;
use rand::Rng;
use reconv::model::{infer_float, infer_plan_float, parse_model, write_model};
use reconv::netadapt::{compile_plan, layer_output_shape, BnLayer, ConvLayer, FcLayer, LayerSpec};
use reconv::ring::{prng, Prng};

fn conv(rng: &mut Prng, c_o: usize, c_i: usize, f: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv(ConvLayer {
        c_o,
        f_h: f,
        f_w: f,
        stride: 1,
        pad,
        kernel: (0..c_o * c_i * f * f).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        bias: (0..c_o).map(|_| rng.gen_range(-0.2..0.2)).collect(),
    })
}

fn maybe_bn(rng: &mut Prng, layers: &mut Vec<LayerSpec>, c: usize) {
    if rng.gen_bool(0.3) {
        layers.push(LayerSpec::Bn(BnLayer {
            channels: c,
            scale: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
            shift: (0..c).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        }));
    }
}

/// A random chain the block patterns accept.
fn random_net(seed: u64) -> (Vec<usize>, Vec<LayerSpec>) {
    let mut rng = prng(seed, "net");
    let input = vec![rng.gen_range(1..3), rng.gen_range(6..13), rng.gen_range(6..13)];
    let mut layers = Vec::new();
    let mut c = rng.gen_range(1..4);
    let f = rng.gen_range(1..4);
    layers.push(conv(&mut rng, c, input[0], f, 1));
    maybe_bn(&mut rng, &mut layers, c);
    let mut shape = input.clone();
    for l in &layers {
        shape = layer_output_shape(l, &shape).unwrap();
    }
    for _ in 0..rng.gen_range(0..3) {
        layers.push(LayerSpec::Relu);
        match rng.gen_range(0..3) {
            0 if shape[1].min(shape[2]) >= 4 => layers.push(LayerSpec::MaxPool { s: 2 }),
            1 if shape[1] % 2 == 0 && shape[2] % 2 == 0 => layers.push(LayerSpec::MeanPool { s: 2 }),
            _ => {}
        }
        let h = layer_output_shape(layers.last().unwrap(), &shape).map(|s| s[1].min(s[2])).unwrap();
        let next_c = rng.gen_range(1..4);
        let (f, pad) = (rng.gen_range(1..=3.min(h)), rng.gen_range(0..2));
        layers.push(conv(&mut rng, next_c, c, f, pad));
        maybe_bn(&mut rng, &mut layers, next_c);
        c = next_c;
        shape = input.clone();
        for l in &layers {
            shape = layer_output_shape(l, &shape).unwrap();
        }
    }
    if rng.gen_bool(0.7) {
        let n_i: usize = shape.iter().product();
        let n_o = rng.gen_range(2..8);
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Fc(FcLayer {
            n_o,
            weights: (0..n_o * n_i).map(|_| rng.gen_range(-0.3..0.3)).collect(),
            bias: vec![0.0; n_o],
        }));
        if rng.gen_bool(0.5) {
            layers.push(LayerSpec::ArgMax);
        }
    }
    (input, layers)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn compiled_plan_computes_the_same_function(seed in any::<u64>()) {
        let (shape, layers) = random_net(seed);
        let plan = compile_plan(&shape, &layers).unwrap();
        let mut rng = prng(seed, "x");
        let x: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = infer_float(&layers, &shape, &x).unwrap();
        let b = infer_plan_float(&plan, &x).unwrap();
        prop_assert_eq!(a.values.len(), b.values.len());
        for (u, v) in a.values.iter().zip(&b.values) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()), "{} vs {}", u, v);
        }
        prop_assert_eq!(a.class, b.class);
    }

    #[test]
    fn recompiling_a_plan_is_a_fixed_point(seed in any::<u64>()) {
        let (shape, layers) = random_net(seed);
        let plan = compile_plan(&shape, &layers).unwrap();
        let again = compile_plan(&shape, &plan.to_layers()).unwrap();
        prop_assert_eq!(again.digest(), plan.digest());
    }

    #[test]
    fn model_files_survive_a_round_trip(seed in any::<u64>()) {
        let (shape, layers) = random_net(seed);
        let (text, blob) = write_model(&shape, 8, &layers).unwrap();
        let model = parse_model(&text, Some(&blob)).unwrap();
        let (text2, blob2) = write_model(&model.input_shape, model.frac_bits, &model.layers).unwrap();
        prop_assert_eq!(&text, &text2);
        prop_assert_eq!(blob, blob2);
        let public = parse_model(&text, None).unwrap();
        prop_assert_eq!(public.plan().unwrap().digest(), model.plan().unwrap().digest());
    }
}
