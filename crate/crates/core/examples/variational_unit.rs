//! One variational unit on a short sequence: posterior and prior, a sampled
//! and a mean-path forward, KL, latent energy and the band penalty.

use eve_lm::rng::Rng;
use eve_lm::tensorcore::{Graph, ParamStore, Tensor};
use eve_lm::varneuron::{
    control_penalty, kl_per_dim, run_unit, ControlConfig, ControlState, Noise, UnitLayout,
    VariationalUnitParams,
};

fn main() -> eve_lm::Result<()> {
    let (t, d_in, d_z, d_out) = (5, 4, 3, 2);
    let mut rng = Rng::new(1);
    for autoregressive in [false, true] {
        let mut layout = UnitLayout::new(d_in, d_z, d_out);
        layout.autoregressive = autoregressive;
        layout.posterior_memory = autoregressive;
        let mut store = ParamStore::new();
        let p = VariationalUnitParams::init(&mut store, "unit", &layout, 0.3, &mut rng);
        let u = Tensor::matrix(t, d_in, (0..t * d_in).map(|_| rng.normal()).collect())?;
        println!(
            "autoregressive prior: {autoregressive} ({} parameters)",
            layout.param_count()
        );

        for (label, sampled) in [("sampled", true), ("mean", false)] {
            let mut g = Graph::new();
            let uv = g.constant(u.clone())?;
            let mut noise_rng = Rng::new(7);
            let mut noise = if sampled {
                Noise::Sample(&mut noise_rng)
            } else {
                Noise::Mean
            };
            let out = run_unit(&mut g, &store, &p, uv, &mut noise)?;
            let state = ControlState::new(&ControlConfig::default());
            let (penalty, band) = control_penalty(&mut g, out.mu2, &state)?;
            println!(
                "  {label:>7}: y[0] = {:?}",
                g.value(out.y)
                    .row(0)
                    .iter()
                    .map(|v| format!("{v:.4}"))
                    .collect::<Vec<_>>()
            );
            println!(
                "           KL {:.4}, per dim {:?}, mean mu2 {:.4}, band penalty {:.4}, inside band {:.2}",
                g.value(out.kl).item(),
                kl_per_dim(&g, &out.dist).iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
                band.mean_mu2,
                penalty.map(|v| g.value(v).item()).unwrap_or(0.0),
                band.inside_band_fraction,
            );
            if let Some(ar) = out.ar_loss {
                println!("           AR loss {:.4}", g.value(ar).item());
            }
        }
    }
    Ok(())
}
