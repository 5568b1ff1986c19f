use std::io::Write;
use std::path::{Path, PathBuf};

use stylebank_core::cache::{write_cache, write_index_listing, CacheReader};
use stylebank_core::digest::fnv1a64;
use stylebank_core::distill::{distill, open_bank, write_bank, write_bank_listing, DistillOptions, KPolicy, BANK_MAGIC};
use stylebank_core::embedding::{
    average_embeddings, extract_crops, finetune_adapter, mock_image_embed, moving_average, project, FinetuneOptions,
    ProjectionWeights, StyleEmbedding, StyleSample, EMBED_DIM,
};
use stylebank_core::image::{read_ppm, write_ppm, RgbImage};
use stylebank_core::metrics::{chamfer_color, eval_pairs};
use stylebank_core::model::{ModelConfig, ToyModel};
use stylebank_core::pipeline::{
    generate_average_image, invert_style_image, stylize_full_concat, stylize, stylize_two_stage, NormStats, StyleInputs,
    StylizeConfig,
};
use stylebank_core::tensor_file::Tensor;

use crate::error::{CliError, CliResult};
use crate::manifest::{write_manifest, Run};
use crate::{
    AvgImageArgs, CacheCommand, ChamferArgs, Cli, Command, DistillArgs, EmbedArgs, EvalArgs, FinetuneArgs, InvertArgs,
    MetricCommand, StylizeArgs,
};

/// Window of the moving average reported for fine-tuning losses.
const LOSS_WINDOW: usize = 20;

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let config = serde_json::to_value(&cli.command).expect("arguments serialize to JSON");
    let config = serde_json::json!({ "args": config });
    let mut run = Run::new(command_name(&cli.command), config, cli.seed);
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Invert(a) => invert(&mut run, cli, a)?,
        Command::Distill(a) => distill_cmd(&mut run, a, seed)?,
        Command::Finetune(a) => finetune(&mut run, cli, a, seed)?,
        Command::Embed(a) => embed(&mut run, cli, a, seed)?,
        Command::Avgimage(a) => avgimage(&mut run, cli, a, seed)?,
        Command::Stylize(a) => stylize_cmd(&mut run, cli, a)?,
        Command::Metric(MetricCommand::Chamfer(a)) => chamfer(&mut run, a, seed)?,
        Command::Metric(MetricCommand::Eval(a)) => eval(&mut run, a, seed)?,
        Command::Cache(CacheCommand::Inspect { path }) => inspect(&mut run, path)?,
    }
    let manifest = run.finish()?;
    if let Some(path) = &cli.manifest {
        write_manifest(&manifest, path)?;
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Invert(_) => "invert",
        Command::Distill(_) => "distill",
        Command::Finetune(_) => "finetune",
        Command::Embed(_) => "embed",
        Command::Avgimage(_) => "avgimage",
        Command::Stylize(_) => "stylize",
        Command::Metric(MetricCommand::Chamfer(_)) => "metric chamfer",
        Command::Metric(MetricCommand::Eval(_)) => "metric eval",
        Command::Cache(CacheCommand::Inspect { .. }) => "cache inspect",
    }
}

fn load_model(cli: &Cli) -> CliResult<ToyModel> {
    let config = match &cli.model {
        Some(path) => read_json::<ModelConfig>(path)?,
        None => ModelConfig::default(),
    };
    Ok(ToyModel::build(config)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// `.ppm` files in `dir`, sorted by name.
fn style_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .ppm images in {}", dir.display())));
    }
    Ok(files)
}

fn load_phi(path: &Path) -> CliResult<StyleEmbedding> {
    Ok(StyleEmbedding::new(Tensor::load(path)?.into_matrix()?)?)
}

fn invert(run: &mut Run, cli: &Cli, a: &InvertArgs) -> CliResult<()> {
    let model = run.phase("model", || load_model(cli))?;
    let (image, id) = run.phase("load", || {
        let bytes = std::fs::read(&a.image).map_err(|e| CliError::io(&a.image, e))?;
        Ok((read_ppm(&a.image)?, fnv1a64(&bytes)))
    })?;
    run.input(&a.image);
    let (traj, entries) = run.phase("invert", || Ok(invert_style_image(&model, &image, a.steps)?))?;
    run.phase("write", || {
        write_cache(&entries, id, &a.out)?;
        if let Some(p) = &a.latent {
            Tensor::from_latent(traj.noisy()).save(p)?;
        }
        Ok(())
    })?;
    run.output(&a.out);
    if let Some(p) = &a.latent {
        run.output(p);
    }
    run.metric("entries", entries.len() as f64);
    println!("{}: {} entries", a.out.display(), entries.len());
    Ok(())
}

fn distill_cmd(run: &mut Run, a: &DistillArgs, seed: u64) -> CliResult<()> {
    let k_policy = match (a.k_scale, a.k, a.k_all) {
        (Some(f), _, _) if !(f.is_finite() && f > 0.0) => {
            return Err(CliError::Usage(format!("--k-scale must be positive, got {f}")))
        }
        (Some(f), _, _) => KPolicy::Scaled(f),
        (_, Some(0), _) => return Err(CliError::Usage("--k must be at least 1".into())),
        (_, Some(k), _) => KPolicy::Fixed(k),
        (_, _, true) => KPolicy::All,
        _ => KPolicy::SingleImage,
    };
    let readers = run.phase("open", || {
        a.caches
            .iter()
            .map(|p| CacheReader::open(p).map_err(CliError::from))
            .collect::<CliResult<Vec<_>>>()
    })?;
    for p in &a.caches {
        run.input(p);
    }
    let opts = DistillOptions {
        k_policy,
        seed,
        ..Default::default()
    };
    let bank = run.phase("distill", || Ok(distill(&readers, &opts)?))?;
    run.phase("write", || Ok(write_bank(&bank, &a.out)?))?;
    run.output(&a.out);
    let single = readers[0].payload_bytes() as f64;
    run.metric("bank_payload_bytes", bank.payload_bytes() as f64);
    run.metric("single_image_payload_bytes", single);
    run.metric("payload_ratio", bank.payload_bytes() as f64 / single.max(1.0));
    println!(
        "{}: {} keys from {} caches, payload {} bytes",
        a.out.display(),
        bank.entries.len(),
        readers.len(),
        bank.payload_bytes()
    );
    Ok(())
}

fn finetune(run: &mut Run, cli: &Cli, a: &FinetuneArgs, seed: u64) -> CliResult<()> {
    let model = run.phase("model", || load_model(cli))?;
    let files = style_images(&a.styles)?;
    let samples = run.phase("load", || {
        files
            .iter()
            .map(|p| {
                let img = read_ppm(p)?;
                Ok(StyleSample {
                    latent: model.codec().encode(&img)?,
                    embedding: mock_image_embed(&img)?,
                })
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    for p in &files {
        run.input(p);
    }
    let a0 = ProjectionWeights::seeded(EMBED_DIM, model.config().dim, seed);
    let opts = FinetuneOptions {
        steps: a.steps,
        lr: a.lr,
        seed,
        prompt: a.prompt.clone(),
    };
    let report = run.phase("finetune", || Ok(finetune_adapter(&a0, &samples, &model, &opts)?))?;
    run.phase("write", || {
        report.weights.save(&a.out)?;
        if let Some(p) = &a.losses {
            let mut csv = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.9}\n"));
            }
            std::fs::write(p, csv).map_err(|e| CliError::io(p, e))?;
        }
        Ok(())
    })?;
    run.output(&a.out);
    if let Some(p) = &a.losses {
        run.output(p);
    }
    let ma = moving_average(&report.losses, LOSS_WINDOW);
    if let (Some(first), Some(last)) = (ma.first(), ma.last()) {
        run.metric("loss_ma_initial", *first);
        run.metric("loss_ma_final", *last);
        run.metric("loss_ma_ratio", last / first);
        println!("{}: moving-average loss {first:.6} -> {last:.6}", a.out.display());
    } else {
        println!("{}: no steps run", a.out.display());
    }
    Ok(())
}

fn embed(run: &mut Run, cli: &Cli, a: &EmbedArgs, seed: u64) -> CliResult<()> {
    let model = run.phase("model", || load_model(cli))?;
    let files = style_images(&a.styles)?;
    let weights = run.phase("load", || Ok(ProjectionWeights::load(&a.adapter)?))?;
    run.input(&a.adapter);
    if weights.dim != model.config().dim {
        return Err(CliError::Usage(format!(
            "adapter produces {}-wide tokens, model expects {}",
            weights.dim,
            model.config().dim
        )));
    }
    let phi = run.phase("embed", || {
        let mut tokens = Vec::new();
        for (i, p) in files.iter().enumerate() {
            let img = read_ppm(p)?;
            let views: Vec<RgbImage> = match a.crop_px {
                Some(px) => extract_crops(&img, px, a.crops_per_image, seed.wrapping_add(i as u64))?,
                None => vec![img],
            };
            for v in &views {
                tokens.push(project(&weights, &mock_image_embed(v)?)?);
            }
        }
        Ok(average_embeddings(&tokens)?)
    })?;
    for p in &files {
        run.input(p);
    }
    run.phase("write", || Ok(Tensor::from_matrix(&phi.tokens).save(&a.out)?))?;
    run.output(&a.out);
    println!("{}: style tokens from {} images", a.out.display(), files.len());
    Ok(())
}

fn avgimage(run: &mut Run, cli: &Cli, a: &AvgImageArgs, seed: u64) -> CliResult<()> {
    let model = run.phase("model", || load_model(cli))?;
    let phi = run.phase("load", || load_phi(&a.phi))?;
    run.input(&a.phi);
    let (latent, stats) = run.phase("generate", || {
        Ok(generate_average_image(&model, &phi, a.steps, seed, (a.grid, a.grid))?)
    })?;
    run.phase("write", || {
        Tensor::from_latent(&latent).save(&a.out)?;
        stats.save(&a.stats)?;
        if let Some(p) = &a.image {
            write_ppm(&model.codec().decode(&latent)?, p)?;
        }
        Ok(())
    })?;
    run.output(&a.out);
    run.output(&a.stats);
    if let Some(p) = &a.image {
        run.output(p);
    }
    println!("{}: statistics for {} steps", a.stats.display(), a.steps);
    Ok(())
}

fn stylize_cmd(run: &mut Run, cli: &Cli, a: &StylizeArgs) -> CliResult<()> {
    let model = run.phase("model", || load_model(cli))?;
    let mut cfg: StylizeConfig = match &a.config {
        Some(p) => {
            run.input(p);
            read_json(p)?
        }
        None => StylizeConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    run.set_config("stylize", serde_json::to_value(&cfg).expect("config serializes to JSON"));

    let (content, norm, phi) = run.phase("load", || {
        Ok((read_ppm(&a.content)?, NormStats::load(&a.stats)?, load_phi(&a.phi)?))
    })?;
    for p in [&a.content, &a.stats, &a.phi] {
        run.input(p);
    }

    let result = if let Some(bank_path) = &a.bank {
        let bank = run.phase("open", || Ok(open_bank(bank_path)?))?;
        run.input(bank_path);
        let high = StyleInputs { source: &bank, norm: &norm };
        match (&a.bank_lo, &a.stats_lo) {
            (Some(lo_path), Some(stats_lo)) => {
                let (bank_lo, norm_lo) = run.phase("open_low", || Ok((open_bank(lo_path)?, NormStats::load(stats_lo)?)))?;
                run.input(lo_path);
                run.input(stats_lo);
                let low = StyleInputs {
                    source: &bank_lo,
                    norm: &norm_lo,
                };
                run.phase("stylize", || Ok(stylize_two_stage(&model, &content, low, high, &phi, &cfg)?))?
            }
            _ => run.phase("stylize", || Ok(stylize(&model, &content, high, &phi, &cfg)?))?,
        }
    } else {
        let readers = run.phase("open", || {
            a.caches
                .iter()
                .map(|p| CacheReader::open(p).map_err(CliError::from))
                .collect::<CliResult<Vec<_>>>()
        })?;
        for p in &a.caches {
            run.input(p);
        }
        run.phase("stylize", || Ok(stylize_full_concat(&model, &content, &readers, &norm, &phi, &cfg)?))?
    };

    run.phase("write", || {
        write_ppm(&result.image, &a.out)?;
        if let Some(p) = &a.latent {
            Tensor::from_latent(&result.latent).save(p)?;
        }
        Ok(())
    })?;
    run.output(&a.out);
    if let Some(p) = &a.latent {
        run.output(p);
    }
    println!("{}: {}x{}", a.out.display(), result.image.width(), result.image.height());
    Ok(())
}

fn chamfer(run: &mut Run, a: &ChamferArgs, seed: u64) -> CliResult<()> {
    let (x, y) = run.phase("load", || Ok((read_ppm(&a.a)?, read_ppm(&a.b)?)))?;
    run.input(&a.a);
    run.input(&a.b);
    let d = run.phase("chamfer", || Ok(chamfer_color(&x, &y, a.subsample, seed)?))?;
    run.metric("chamfer", d);
    println!("{d:.9}");
    Ok(())
}

fn eval(run: &mut Run, a: &EvalArgs, seed: u64) -> CliResult<()> {
    let report = run.phase("eval", || Ok(eval_pairs(&a.stylized, &a.styles, a.fraction, seed, a.subsample)?))?;
    for p in &report.pairs {
        run.input(&p.output);
        run.input(&p.style);
    }
    if let Some(csv) = &a.csv {
        run.phase("write", || std::fs::write(csv, report.to_csv()).map_err(|e| CliError::io(csv, e)))?;
        run.output(csv);
    }
    for (g, m) in &report.group_means {
        let name = if g.is_empty() { "all" } else { g };
        run.metric(&format!("mean_{name}"), *m);
        println!("{name},{m:.9}");
    }
    Ok(())
}

fn inspect(run: &mut Run, path: &Path) -> CliResult<()> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        // A short file falls through to the cache reader, which reports it.
        let _ = f.read(&mut magic).map_err(|e| CliError::io(path, e))?;
    }
    let mut text = Vec::new();
    run.phase("inspect", || {
        if magic == BANK_MAGIC {
            write_bank_listing(&open_bank(path)?, &mut text)
        } else {
            write_index_listing(&CacheReader::open(path)?, &mut text)
        }
        .map_err(|e| CliError::io("<stdout>", e))
    })?;
    run.input(path);
    std::io::stdout()
        .write_all(&text)
        .map_err(|e| CliError::io("<stdout>", e))
}
