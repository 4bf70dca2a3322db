use stgn::config::{TrainConfig, Variant, SemanticsMode};
use stgn::eval::{evaluate, EvalMode};
use stgn::graph::{chronological_split, ingest_records};
use stgn::semantics::{encode_genres, GenreEmbeddingTable};
use stgn::synth::{planted_trace, PlantedTraceConfig};

fn main() {
    let t0 = std::time::Instant::now();
    for label in ["TGN-L", "M1-STGN-L", "M2-STGN-L"] {
        let mut aps = Vec::new();
        for seed in 0..5u64 {
            let t1 = std::time::Instant::now();
            let variant = Variant::from_label(label).unwrap();
            let cfg = TrainConfig {
                d_v: 8, d_e: 1, d_m: 32, d_t: 16, d_h: 16, d_emb: 32, d_att: 32,
                n_heads: 2, layers: 1, n_neighbors: 10,
                spe_fourier_dim: 64, spe_mlp_dim: 16, d_spe: 16,
                batch_size: 100, epochs: 3, learning_rate: 3e-3, seed,
                aggregator: variant.aggregator,
                semantics: variant.semantics,
                structure_semantics: variant.structure,
                ..TrainConfig::default()
            };
            let trace = planted_trace(&PlantedTraceConfig { seed, ..Default::default() });
            let (store, catalog, _) = ingest_records(trace, cfg.d_v, cfg.d_e, seed).unwrap();
            let split = chronological_split(&store).unwrap();
            let table = GenreEmbeddingTable::one_hot(&catalog);
            let sets = encode_genres(&catalog, &table).unwrap();
            let sem = (cfg.semantics != SemanticsMode::Off).then_some(sets.as_slice());
            let out = stgn::train::train(&store, &catalog, sem, split.train.clone(), &cfg, None).unwrap();
            let report = evaluate(&store, &catalog, sem, &split, &out.params, split.test.clone(), EvalMode::Inductive, seed).unwrap();
            aps.push(report.ap);
            eprintln!("  {label} seed {seed}: AP {:.4} (train {:.1}s, eval {:.1}s)", report.ap, out.train_seconds, t1.elapsed().as_secs_f64() - out.train_seconds);
        }
        let mut s = aps.clone();
        s.sort_by(f64::total_cmp);
        println!("{label}: median inductive AP {:.4}  (all: {:?})", s[2], aps.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>());
    }
    println!("total {:?}", t0.elapsed());
}
