use ereformer::model::grvit::{self, AttentionNorm, GrvitConfig, TransferMode};
use ereformer::model::{Bound, Init, ParamStore};
use ereformer::rng::{normal, stream};
use ereformer::Graph;

/// Runs one recurrent unit over sequences of growing length: the number of
/// live hidden states stays flat, and the first input still shapes late outputs.
fn main() -> ereformer::Result<()> {
    let (n, c) = (16, 8);
    let mut store = ParamStore::<f64>::new();
    grvit::declare(&mut Init { store: &mut store, seed: 1 }, "gr", n, c, 2, TransferMode::UpdateGate)?;
    let out_shape = store.get("gr.out.w")?.shape().to_vec();
    store.set("gr.out.w", normal(&out_shape, 0.3, &mut stream(2, "out")))?;
    let cfg = GrvitConfig { heads: 2, transfer: TransferMode::UpdateGate, attention_norm: AttentionNorm::Kernel, eps: 1e-5 };

    for t in [2u64, 8, 32] {
        let g = Graph::new();
        let b = Bound::new(&g, &store, false);
        let feats: Vec<_> = (0..t).map(|i| g.constant(normal(&[n, c], 1.0, &mut stream(i, "f")))).collect();
        let base = grvit::live_states();
        grvit::reset_peak_states();
        let outs = grvit::run_sequence(&b, "gr", &feats, &cfg)?;
        println!("T={t:<3} outputs {} peak live states {}", outs.len(), grvit::peak_live_states() - base);
    }

    // change only the first bin and compare the fourth output
    let run = |first_scale: f64| -> ereformer::Result<Vec<f64>> {
        let g = Graph::new();
        let b = Bound::new(&g, &store, false);
        let feats: Vec<_> = (0..4u64)
            .map(|i| {
                let f = normal(&[n, c], 1.0, &mut stream(i, "f"));
                g.constant(if i == 0 { f.map(|v| v * first_scale) } else { f })
            })
            .collect();
        let outs = grvit::run_sequence(&b, "gr", &feats, &cfg)?;
        Ok(outs[3].value().data().to_vec())
    };
    let (a, z) = (run(1.0)?, run(0.0)?);
    let diff = a.iter().zip(&z).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("largest change in output 4 when bin 1 is zeroed: {diff:.3e}");
    Ok(())
}
