use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use std::hint::black_box;

use imlw_bench::{bundle, observation, pick_place};
use imlw_core::diffusion::{draw_noise, training_loss, DiffusionPolicy, Policy};
use imlw_core::netcore::{encoder_input, EncoderVariant, Graph, NoiseNetVariant, NumericArray};
use imlw_core::rng::Rng;
use imlw_core::sim::CONTROL_DT;
use imlw_core::ArmCommand;

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_fwd_bwd");
    for n in [64usize, 128, 256] {
        let a = NumericArray::new(vec![n, n], (0..n * n).map(|i| (i % 17) as f64 * 0.01).collect()).unwrap();
        let b = a.clone();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut graph = Graph::new();
                let x = graph.input(a.clone());
                let y = graph.input(b.clone());
                let z = graph.matmul(x, y).unwrap();
                let l = graph.mean_square(z);
                black_box(graph.backward(l).unwrap());
            })
        });
    }
    g.finish();
}

fn sim(c: &mut Criterion) {
    let (_, world) = pick_place();
    let cmd = ArmCommand { vx: 0.2, vy: -0.1, vyaw: 0.5, pwm_target: 1.0 };
    c.bench_function("sim_step", |b| b.iter(|| black_box(world.step(&cmd, CONTROL_DT).unwrap())));
    c.bench_function("observation_capture", |b| b.iter(|| black_box(observation(&world))));
}

fn train_step(c: &mut Criterion) {
    let (_, world) = pick_place();
    let obs = observation(&world);
    let mut g = c.benchmark_group("train_batch64");
    g.sample_size(20);
    for (enc, noise) in [(EncoderVariant::Small, NoiseNetVariant::TemporalConv), (EncoderVariant::Pyramid, NoiseNetVariant::Attention)] {
        let bundle = bundle(enc, noise);
        let input = encoder_input(&bundle.net.encoder, &obs, &bundle.stats).unwrap();
        let inputs = vec![&input; 64];
        let h = bundle.horizon();
        let x0 = NumericArray::zeros(&[64 * h, 4]);
        let mut rng = Rng::seed_from_u64(1);
        let draw = draw_noise(64, h, 4, &bundle.schedule, &mut rng);
        g.bench_function(format!("{enc}+{noise}"), |b| {
            b.iter(|| {
                let (f, loss) = training_loss(&bundle.net, &bundle.params, &bundle.schedule, &inputs, &x0, &draw).unwrap();
                black_box(f.gradients(loss).unwrap());
            })
        });
    }
    g.finish();
}

fn plan(c: &mut Criterion) {
    let (task, world) = pick_place();
    let obs = observation(&world);
    let bundle = bundle(EncoderVariant::Small, NoiseNetVariant::TemporalConv);
    let mut g = c.benchmark_group("policy");
    g.sample_size(20);
    g.bench_function("plan_t50", |b| {
        let mut p = DiffusionPolicy::new(&bundle);
        p.reset(&world, &task, 0).unwrap();
        b.iter(|| black_box(p.plan(&obs, &world, &task).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, gemm, sim, train_step, plan);
criterion_main!(benches);
