use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use flip_core::calibrate::gp::{suggest, GpHyper};
use flip_core::sac::Transition;
use flip_core::sim::{Aabb, Collider, ParticleSystem, Pose, Shape};
use flip_core::{PolicyState, SacConfig, SimParams};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn settled_block(count: usize) -> ParticleSystem {
    let p = SimParams::midpoint();
    let region = Aabb::new(Vector3::new(-0.1, -0.1, 0.02), Vector3::new(0.1, 0.1, 0.3));
    let mut s = ParticleSystem::spawn_block(&region, count, p, 1).unwrap();
    s.add_collider(Collider::new(Shape::Plane {}, Pose::identity()).unwrap());
    for _ in 0..200 {
        s.step().unwrap();
    }
    s
}

fn sim_step(c: &mut Criterion) {
    for n in [500, 1500] {
        let base = settled_block(n);
        c.bench_function(&format!("sim_step_{n}"), |b| {
            b.iter_batched_ref(|| base.clone(), |s| s.step().unwrap(), BatchSize::SmallInput)
        });
    }
}

fn gp_suggest(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs: Vec<Vec<f64>> = (0..60).map(|_| (0..9).map(|_| rng.gen()).collect()).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.iter().sum::<f64>().sin().abs()).collect();
    let hyper = GpHyper::default_for(9);
    c.bench_function("gp_suggest_60x9", |b| {
        b.iter(|| {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            black_box(suggest(xs.clone(), &ys, &hyper, &[], &mut r))
        })
    });
}

fn sac_update(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<Transition> = (0..256)
        .map(|_| Transition {
            obs: [rng.gen(), rng.gen(), rng.gen()],
            action: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            reward: rng.gen_range(-15.0..1.0),
            next_obs: [rng.gen(), rng.gen(), rng.gen()],
            done: rng.gen_bool(0.05),
        })
        .collect();
    let agent = PolicyState::new(SacConfig::default()).unwrap();
    let mut group = c.benchmark_group("sac");
    group.sample_size(20);
    group.bench_function("update_256x256_batch256", |b| {
        b.iter_batched_ref(|| agent.clone(), |a| a.update(&batch).unwrap(), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, sim_step, gp_suggest, sac_update);
criterion_main!(benches);
