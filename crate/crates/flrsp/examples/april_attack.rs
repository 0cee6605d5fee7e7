//! Closed-form gradient inversion against a small vision transformer.
//!
//! The attention-module gradients of a ViT admit an exact linear recovery
//! of the patch embeddings, which then invert to pixels by least squares.
//! Against unmasked gradients the reconstruction is pixel-perfect; freezing
//! the positional embedding or randomly withholding coordinates breaks the
//! linear system and the recovered images collapse.
//!
//!     cargo run --release -p flrsp --example april_attack [images]

use flrsp::attacks::{april_reconstruct, InterceptedRound};
use flrsp::data::synthetic_blobs;
use flrsp::fl::{mask_update, sample_mask, Defense};
use flrsp::metrics::{median, ssim, SsimParams};
use flrsp::models::{desk_vit, Model, ModelSpec};
use flrsp::privacy::fixed_position_filter;
use flrsp::Result;

fn main() -> Result<()> {
    let images: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(15);

    let seed = 42;
    let vit = desk_vit(4);
    let spec = ModelSpec::Vit(vit.clone());
    let model = Model::build(&spec, seed)?;
    let global = model.init_params();
    let data = synthetic_blobs(4, images, 8, 8, 0.1, seed)?;

    let cells = [
        Defense::None,
        Defense::FixedPosition,
        Defense::Flrsp { r: 0.2 },
        Defense::Flrsp { r: 0.5 },
        Defense::Flrsp { r: 0.8 },
    ];

    println!("closed-form attention inversion vs desk ViT ({images} images)");
    for defense in cells {
        let mut scores = Vec::with_capacity(images);
        let mut degenerate = 0;
        for (i, (x, label)) in data.samples().enumerate() {
            let (_, grads) = model.loss_and_grads(&global, x, label)?;
            let update = match &defense {
                Defense::None => grads,
                Defense::FixedPosition => fixed_position_filter(&grads, &spec)?,
                Defense::Flrsp { r } => {
                    let mask = sample_mask(*r, &grads, 0, i, seed)?;
                    mask_update(&grads, &mask)?
                }
                other => panic!("unexpected defense {other:?}"),
            };
            let intercepted = InterceptedRound {
                global: global.clone(),
                update,
                label,
                defense: defense.clone(),
            };
            let rec = april_reconstruct(&intercepted, &vit)?;
            degenerate += usize::from(rec.degenerate);
            let recon = rec.image.reshaped(x.shape().to_vec())?;
            scores.push(ssim(x, &recon, &SsimParams::default())?);
        }
        let label = match &defense {
            Defense::Flrsp { r } => format!("flrsp R={r}"),
            other => other.name().to_string(),
        };
        println!(
            "  defense {:<16} median ssim {:.4}   degenerate {degenerate}/{images}",
            label,
            median(&scores)?
        );
    }
    println!("\n(>0.95: images leak; <0.5: reconstruction failed)");
    Ok(())
}
