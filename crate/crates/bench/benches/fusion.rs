use criterion::{criterion_group, criterion_main, Criterion};
use otfuse_core::model::{permute_model, random_permutations};
use otfuse_core::{
    fuse, random_model, synthesize_dataset, ArchSpec, CostKind, FusionConfig, GeneratorSpec, Solver,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_fuse(c: &mut Criterion) {
    let a = random_model(&ArchSpec::small_gcn(8, 32, true), 1).unwrap();
    let perms = random_permutations(&a, &mut ChaCha8Rng::seed_from_u64(2));
    let b = permute_model(&a, &perms).unwrap();
    let data = synthesize_dataset(&GeneratorSpec::default(), 3).unwrap();

    let mut group = c.benchmark_group("fuse");
    group.sample_size(10);
    for (name, solver, kind, samples) in [
        ("emd_efd", Solver::Emd, CostKind::Efd, 64),
        ("emd_qe", Solver::Emd, CostKind::Qe, 64),
        ("sinkhorn_efd", Solver::Sinkhorn, CostKind::Efd, 64),
        ("emd_fgw", Solver::Emd, CostKind::Fgw, 2),
    ] {
        let config = FusionConfig {
            sample_size: samples,
            ..FusionConfig::new(solver, kind)
        };
        group.bench_function(name, |bench| bench.iter(|| fuse(&a, &b, &data, &config).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_fuse);
criterion_main!(benches);
