use std::fmt::Write as _;

use derain_core::imageio::{load_png, save_png};
use derain_core::rainmix::{
    apply_draw, compose_rainy, sample_draw, synth_rain_streaks, warp, AugmentSpec, RainMixDraw, StreakRanges,
};
use derain_core::tensor::Tensor;
use derain_core::train::{toy_pair, ToyDatasetSpec, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::PreviewArgs;
use crate::files::{create_dir, write_text};
use crate::{CliError, CliResult};

/// Fixed files of a preview; `path<k>.png` per chain come in addition.
pub const PREVIEW_FILES: [&str; 7] = [
    "original.png",
    "blended.png",
    "rain.png",
    "rain_blended.png",
    "composed.png",
    "sheet.png",
    "manifest.txt",
];

const GAP: usize = 2;

fn gray_to_rgb(t: &Tensor<f32>) -> CliResult<Tensor<f32>> {
    let (_, _, h, w) = t.dims4()?;
    let plane = &t.data()[..h * w];
    Ok(Tensor::new(&[1, 3, h, w], plane.repeat(3))?)
}

/// Tiles `(1, 3, H, W)` images left to right on a white background.
fn sheet(tiles: &[Tensor<f32>]) -> CliResult<Tensor<f32>> {
    let (_, _, h, w) = tiles[0].dims4()?;
    let total_w = tiles.len() * w + (tiles.len() - 1) * GAP;
    let mut out = Tensor::full(&[1, 3, h, total_w], 1.0f32);
    let d = out.data_mut();
    for (i, t) in tiles.iter().enumerate() {
        let x0 = i * (w + GAP);
        for c in 0..3 {
            for y in 0..h {
                let src = &t.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let dst = (c * h + y) * total_w + x0;
                d[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

fn describe(text: &mut String, prefix: &str, draw: &RainMixDraw) {
    let _ = writeln!(text, "{prefix}.blend={}", draw.blend);
    for (k, (p, w)) in draw.paths.iter().zip(&draw.weights).enumerate() {
        let ops: Vec<String> = p.ops.iter().map(|o| format!("{}:{}", o.op.name(), o.magnitude)).collect();
        let _ = writeln!(
            text,
            "{prefix}.path{k} weight={w} prefix={} ops={}",
            p.prefix,
            ops.join(",")
        );
    }
}

/// One RainMix draw on a background and one on a synthetic rain layer,
/// saved tile by tile, as a single contact sheet and with a manifest of
/// every sampled op and weight. Fully determined by the seed.
pub fn cmd_augment_preview(args: &PreviewArgs) -> CliResult<()> {
    let spec: AugmentSpec = match &args.config {
        Some(p) => TrainConfig::from_file(p)?
            .rainmix
            .ok_or_else(|| CliError::Usage("rainmix is off in this config".into()))?,
        None => AugmentSpec::default(),
    };
    spec.validate()?;
    let (image, source) = match &args.image {
        Some(p) => (load_png(p)?, p.display().to_string()),
        None => (toy_pair(&ToyDatasetSpec::default(), 0)?.1.cast::<f32>(), "toy:0".to_string()),
    };
    let (_, _, h, w) = image.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let streaks = StreakRanges::default().sample(&mut rng);
    let rain: Tensor<f32> = synth_rain_streaks(h, w, &streaks, &mut rng)?;
    let bg_draw = sample_draw(&spec, &mut rng)?;
    let rain_draw = sample_draw(&spec, &mut rng)?;

    let paths: Vec<Tensor<f32>> = bg_draw
        .paths
        .iter()
        .map(|p| warp(&image, &p.transform(h, w)))
        .collect::<Result<_, _>>()?;
    let blended = apply_draw(&image, &bg_draw)?;
    let rain_blended = apply_draw(&rain, &rain_draw)?;
    let composed = compose_rainy(&blended, &rain_blended)?;

    create_dir(&args.out)?;
    let mut files = vec![("original.png".to_string(), image.clone())];
    files.extend(paths.iter().enumerate().map(|(k, t)| (format!("path{k}.png"), t.clone())));
    files.push(("blended.png".into(), blended));
    files.push(("rain.png".into(), gray_to_rgb(&rain)?));
    files.push(("rain_blended.png".into(), gray_to_rgb(&rain_blended)?));
    files.push(("composed.png".into(), composed));
    for (name, t) in &files {
        save_png(&args.out.join(name), t)?;
    }
    let tiles: Vec<Tensor<f32>> = files.iter().map(|(_, t)| t.clone()).collect();
    save_png(&args.out.join("sheet.png"), &sheet(&tiles)?)?;

    let mut text = String::new();
    let _ = writeln!(text, "# augment-preview; sheet.png tiles follow the order of `tiles`");
    let _ = writeln!(text, "seed={}", args.seed);
    let _ = writeln!(text, "image={source}");
    let _ = writeln!(
        text,
        "n_paths={} ops_per_path={} dirichlet_alpha={} beta={},{}",
        spec.n_paths, spec.ops_per_path, spec.dirichlet_alpha, spec.beta.0, spec.beta.1
    );
    let _ = writeln!(
        text,
        "streaks density={} length={} angle={} width={} intensity={}",
        streaks.density, streaks.length, streaks.angle, streaks.width, streaks.intensity
    );
    describe(&mut text, "background", &bg_draw);
    describe(&mut text, "rain", &rain_draw);
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    let _ = writeln!(text, "tiles={}", names.join(","));
    write_text(&args.out.join("manifest.txt"), &text)?;
    print!("{text}");
    Ok(())
}
