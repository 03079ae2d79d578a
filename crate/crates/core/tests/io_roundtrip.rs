use otfuse_core::model::{load_model, save_model};
use otfuse_core::{
    load_dataset, random_model, synthesize_dataset, write_dataset, ArchSpec, DatasetFormat,
    GeneratorSpec,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_round_trip(seed in any::<u64>(), density in 0.0f64..=1.0, dim in 1usize..6) {
        let spec = GeneratorSpec {
            count: 12,
            min_vertices: 1,
            max_vertices: 8,
            edge_density: density,
            feature_dim: dim,
            ..Default::default()
        };
        let data = synthesize_dataset(&spec, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&data, &path).unwrap();
        let back = load_dataset(&path, DatasetFormat::JsonLines).unwrap();
        prop_assert_eq!(back.len(), data.len());
        for (g, h) in data.graphs().iter().zip(back.graphs()) {
            prop_assert_eq!(g.edges(), h.edges());
            prop_assert_eq!(g.features(), h.features());
            prop_assert_eq!(g.target(), h.target());
        }
    }

    #[test]
    fn model_round_trip(seed in any::<u64>(), bn in any::<bool>(), mlp in any::<bool>()) {
        let arch = if mlp { ArchSpec::small_mlp(4, 6) } else { ArchSpec::small_gcn(4, 6, bn) };
        let model = random_model(&arch, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&model, &path).unwrap();
        prop_assert_eq!(load_model(&path).unwrap(), model);
    }
}
