//! Print the shape law and parameter count of every block kind, then run
//! the built blocks on random input to show the forward pass agrees.
//!
//! cargo run --example block_shapes

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vesselgan::blocks::{
    make_discriminator_residual_block, make_downsampling_block, make_generator_residual_block, make_sfa_block,
    make_upsampling_block, BlockConfig, DownsamplingBlock, ResidualBlock, SfaBlock, TensorSpec, UpsamplingBlock,
};
use vesselgan::nn::{Init, ParamStore, Pass};

fn main() -> vesselgan::Result<()> {
    let dev = Device::Cpu;
    let mut store = ParamStore::new(DType::F32, dev.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = Init::new(&mut store, &mut rng);
    let input = TensorSpec::new(2, 16, 64, 64)?;
    let x = Tensor::randn(0f32, 1f32, (2, 16, 64, 64), &dev)?;

    let down = make_downsampling_block(&BlockConfig::downsampling(16, 32))?;
    let up = make_upsampling_block(&BlockConfig::upsampling(32, 16))?;
    let gres = make_generator_residual_block(&BlockConfig::generator_residual(16))?;
    let dres = make_discriminator_residual_block(&BlockConfig::discriminator_residual(16))?;

    let mid = down.output_spec(&input)?;
    let y = DownsamplingBlock::new(down.clone(), &mut init.sub("down"))?.forward(&x, Pass::TRAIN)?;
    println!("downsampling      {input} -> {mid}  params {:6}  forward {:?}", down.param_count(), y.dims());
    let back = up.output_spec(&mid)?;
    let z = UpsamplingBlock::new(up.clone(), &mut init.sub("up"))?.forward(&y, Pass::TRAIN)?;
    println!("upsampling        {mid} -> {back}  params {:6}  forward {:?}", up.param_count(), z.dims());
    for (name, g) in [("generator res", &gres), ("discriminator res", &dres)] {
        let r = ResidualBlock::new(g.clone(), &mut init.sub(name))?.forward(&x, Pass::TRAIN)?;
        println!("{name:17} {input} -> {}  params {:6}  forward {:?}", g.output_spec(&input)?, g.param_count(), r.dims());
    }
    // the upsampled deep features merge into the same-resolution encoder stage
    let sfa = make_sfa_block(&back, &input)?;
    let f = SfaBlock::new(sfa.clone(), &mut init.sub("sfa"))?.forward(&z, &x, Pass::TRAIN)?;
    println!("sfa               {input} -> {}  params {:6}  forward {:?}", sfa.output_spec(&input)?, sfa.param_count(), f.dims());
    Ok(())
}
