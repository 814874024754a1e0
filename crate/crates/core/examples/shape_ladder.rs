use ereformer::model::{Bound, ModelConfig, Network, LEVELS};
use ereformer::{Graph, Tensor};

/// Feature shapes at every level of the default network for one 64x64 bin.
fn main() -> ereformer::Result<()> {
    let cfg = ModelConfig { height: 64, width: 64, ..ModelConfig::default() };
    let net = Network::<f32>::new(cfg, 0)?;
    println!("{} parameters", net.params.num_scalars());
    let g = Graph::new();
    let b = Bound::new(&g, &net.params, false);
    let mut states = Network::<f32>::empty_states();
    let out = net.forward_bin(&b, g.constant(Tensor::zeros(&[2, 64, 64])), &mut states)?;
    for i in 0..LEVELS {
        println!(
            "level /{:<2} encoder {:?} recurrent {:?} decoder {:?}",
            4 << i,
            out.encoder[i].shape(),
            out.fused[i].shape(),
            out.decoder[LEVELS - 1 - i].shape()
        );
    }
    println!("depth {:?}", out.depth.shape());
    Ok(())
}
