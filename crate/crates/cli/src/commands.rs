use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use isa_core::config::RunConfig;
use isa_core::datagen::{gen_dataset, Dataset};
use isa_core::encoders::TeacherBundle;
use isa_core::experiment::{sweep_table, token_length_sweep};
use isa_core::gradcheck::{run_gradcheck, GradCheckConfig, InjectedError, LossTerm};
use isa_core::io::{comment_block, read_dataset, write_dataset, MetricsDocument};
use isa_core::retrieval::{build_index, evaluate_baselines, evaluate_model, GalleryIndex, IndexMeta};
use isa_core::trainer::{history_csv, train_with, Checkpoint};
use isa_core::{Error, Result};

use crate::TermArg;

pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed `{s}`")))
        })
        .collect()
}

fn ensure_out(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.paths.out)?;
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let path = config.paths.resolve(&config.paths.dataset);
    let (dataset, _) = read_dataset(&path).map_err(|e| with_path(e, &path))?;
    Ok(dataset)
}

fn load_checkpoint(config: &RunConfig) -> Result<Checkpoint> {
    let path = config.paths.resolve(&config.paths.checkpoint);
    Checkpoint::load(&path).map_err(|e| with_path(e, &path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    }
}

pub fn gen_data(config: &RunConfig) -> Result<()> {
    ensure_out(config)?;
    let dataset = gen_dataset(&config.datagen)?;
    let path = config.paths.resolve(&config.paths.dataset);
    write_dataset(&path, &dataset, &config.to_toml()?)?;
    eprintln!(
        "wrote {} ({} train, {} gallery, {} references, {} triplets)",
        path.display(),
        dataset.train.len(),
        dataset.gallery.len(),
        dataset.queries.len(),
        dataset.triplets.len()
    );
    Ok(())
}

pub fn train(config: &RunConfig) -> Result<()> {
    ensure_out(config)?;
    let dataset = load_dataset(config)?;
    let n_concepts = dataset.params.n_concepts;
    let teacher = TeacherBundle::new(config.teacher.clone(), n_concepts)?;
    let echo = config.to_toml()?;
    let started = Instant::now();
    let result = train_with(&dataset.train, n_concepts, &teacher, &config.train, |r| {
        eprintln!(
            "epoch {:>3}  gcd {:.4}  lar {:.4}  total {:.4}  lr {:.2e}",
            r.epoch, r.gcd, r.lar, r.total, r.lr
        )
    });
    let mut ckpt = match result {
        Ok(ckpt) => ckpt,
        Err(Error::Diverged {
            epoch,
            step,
            reason,
            mut last_good,
        }) => {
            last_good.config_echo = echo;
            let path = config.paths.resolve("checkpoint.diverged.json");
            last_good.save(&path)?;
            eprintln!("last good parameters saved to {}", path.display());
            return Err(Error::Diverged {
                epoch,
                step,
                reason,
                last_good,
            });
        }
        Err(e) => return Err(e),
    };
    ckpt.config_echo = echo.clone();
    let ckpt_path = config.paths.resolve(&config.paths.checkpoint);
    ckpt.save(&ckpt_path)?;
    let table_path = config.paths.resolve(&config.paths.loss_table);
    fs::write(&table_path, comment_block(&echo) + &history_csv(&ckpt.history))?;
    eprintln!(
        "wrote {} and {} in {:.1}s",
        ckpt_path.display(),
        table_path.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn embed_gallery(config: &RunConfig) -> Result<()> {
    ensure_out(config)?;
    let dataset = load_dataset(config)?;
    let teacher = TeacherBundle::new(config.teacher.clone(), dataset.params.n_concepts)?;
    let index = build_index(
        &dataset.gallery,
        &teacher,
        IndexMeta {
            seed: config.seed,
            config: config.to_toml()?,
            ..IndexMeta::default()
        },
    )?;
    let path = config.paths.resolve(&config.paths.index);
    index.save(&path)?;
    eprintln!("wrote {} ({} x {})", path.display(), index.len(), index.dim());
    Ok(())
}

pub fn eval(config: &RunConfig, baselines: bool, sweep: Option<(Vec<usize>, Vec<u64>)>) -> Result<()> {
    ensure_out(config)?;
    let dataset = load_dataset(config)?;
    let ckpt = load_checkpoint(config)?;
    let teacher = ckpt.teacher()?;
    let index_path = config.paths.resolve(&config.paths.index);
    let index = GalleryIndex::load(&index_path).map_err(|e| with_path(e, &index_path))?;

    let mut doc = MetricsDocument {
        seed: config.seed,
        config: Some(config.to_value()?),
        ..MetricsDocument::default()
    };
    let metrics = evaluate_model(&dataset, &index, &ckpt.model(), &teacher)?;
    doc.insert_all(metrics.entries("model."));
    doc.metrics.insert("model.avg_recall".into(), metrics.average_recall());
    if baselines {
        for (b, m) in evaluate_baselines(&dataset, &index, &teacher)? {
            let prefix = format!("{}.", b.name());
            doc.insert_all(m.entries(&prefix));
            doc.metrics.insert(format!("{prefix}avg_recall"), m.average_recall());
        }
    }
    if let Some((lengths, seeds)) = sweep {
        let rows = token_length_sweep(&config.datagen, &config.teacher, &config.train, &lengths, &seeds)?;
        for row in &rows {
            for (k, m) in &row.summary.mean {
                doc.metrics.insert(format!("sweep.l{}.{k}.mean", row.tokens), *m);
            }
            for (k, s) in &row.summary.std {
                doc.metrics.insert(format!("sweep.l{}.{k}.std", row.tokens), *s);
            }
        }
        let path = config.paths.resolve(&config.paths.sweep);
        fs::write(&path, comment_block(&config.to_toml()?) + &sweep_table(&rows))?;
        eprintln!("wrote {}", path.display());
    }
    for (k, v) in &doc.metrics {
        println!("{k} = {v:.4}");
    }
    let path = config.paths.resolve(&config.paths.metrics);
    fs::write(&path, doc.to_toml()?)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub struct GradcheckOptions {
    pub term: TermArg,
    pub seeds: Vec<u64>,
    pub eps: Option<f64>,
    pub tolerance: f64,
    pub inject: Option<InjectedError>,
}

pub fn gradcheck(config: &RunConfig, opts: &GradcheckOptions) -> Result<()> {
    ensure_out(config)?;
    let terms: Vec<LossTerm> = match opts.term {
        TermArg::Gcd => vec![LossTerm::Gcd],
        TermArg::Lar => vec![LossTerm::Lar],
        TermArg::Total => vec![LossTerm::Total],
        TermArg::All => LossTerm::ALL.to_vec(),
    };
    let started = Instant::now();
    let mut report = String::new();
    let mut failures = Vec::new();
    for &seed in &opts.seeds {
        for &term in &terms {
            let defaults = GradCheckConfig::default();
            let cfg = GradCheckConfig {
                seed,
                eps: opts.eps.unwrap_or(defaults.eps),
                mode: config.train.mode,
                ..defaults
            };
            let r = run_gradcheck(&cfg, term, opts.inject.clone())?;
            let ok = r.max_rel_error <= opts.tolerance;
            let _ = writeln!(
                report,
                "seed {seed} {term}: max relative error {:.3e} {}",
                r.max_rel_error,
                if ok { "ok" } else { "FAIL" }
            );
            for p in &r.params {
                let _ = writeln!(
                    report,
                    "  {:<20} worst [{}, {}] analytic {:+.6e} numeric {:+.6e} rel {:.3e}",
                    p.name, p.worst_index.0, p.worst_index.1, p.analytic, p.numeric, p.rel_error
                );
            }
            if !ok {
                failures.push(format!("seed {seed} {term}"));
            }
        }
    }
    let _ = writeln!(report, "elapsed {:.1}s", started.elapsed().as_secs_f64());
    print!("{report}");
    let header = format!(
        "# eps {:e}, tolerance {:e}\n{}",
        opts.eps.unwrap_or(GradCheckConfig::default().eps),
        opts.tolerance,
        comment_block(&config.to_toml()?)
    );
    fs::write(config.paths.resolve(&config.paths.gradcheck), header + &report)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Check(format!(
            "gradient check above {:e}: {}",
            opts.tolerance,
            failures.join(", ")
        )))
    }
}

pub fn export_attention(config: &RunConfig, image_id: &str) -> Result<()> {
    ensure_out(config)?;
    let dataset = load_dataset(config)?;
    let image = dataset.find_image(image_id)?;
    let ckpt = load_checkpoint(config)?;
    let teacher = ckpt.teacher()?;
    let (_, att) = ckpt.model().encode_image(image, &teacher)?;
    let mut out = format!(
        "# image {image_id}, {} tokens x {} cells ({}x{}, row-major)\n",
        att.tokens(),
        att.height * att.width,
        att.height,
        att.width
    );
    out.push_str(&comment_block(&config.to_toml()?));
    for l in 0..att.tokens() {
        let row: Vec<String> = att.maps.row(l).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    let path = config.paths.resolve(&format!("attention_{image_id}.txt"));
    fs::write(&path, out)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}
