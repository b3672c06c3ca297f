use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adcrowd::amg::classification_accuracy;
use adcrowd::gradcheck::run_suite;
use adcrowd::pipeline::{evaluate, evaluate_oracle, format_table, predict, threshold_sweep, SWEEP_THRESHOLDS};
use adcrowd::synth::io::{format_manifest, parse_manifest, read_dmap, read_pgm, write_dmap, write_pgm, ManifestEntry};
use adcrowd::synth::{synth_scene, Corpus};
use adcrowd::{
    count_from_density, train_amg as fit_amg, train_dme as fit_dme, write_checkpoint, AmgNetwork, DmeNetwork, Label,
    SceneSample, SuiteOptions,
};

use crate::config::{RunConfig, Split};
use crate::CliError;

const MANIFEST: &str = "manifest.txt";

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

fn require(path: &Path, what: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            what,
            path: path.to_path_buf(),
        })
    }
}

fn write_resolved(cfg: &RunConfig, out: &Path, command: &str) -> Result<(), CliError> {
    write(&out.join(format!("{command}.cfg")), cfg.to_text(out))
}

fn write_loss(path: &Path, history: &[f64]) -> Result<(), CliError> {
    let mut s = String::new();
    for (e, loss) in history.iter().enumerate() {
        let _ = writeln!(s, "{} {loss}", e + 1);
    }
    write(path, s)
}

fn entry_for(split: &str, label: Label, index: usize) -> ManifestEntry {
    let stem = PathBuf::from(split).join(label.as_str()).join(format!("{index:05}"));
    ManifestEntry {
        index,
        label,
        image: stem.with_extension("pgm"),
        dmap: stem.with_extension("dmap"),
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dir = cfg.corpus_dir(out);
    let corpus = Corpus::generate(&cfg.corpus)?;
    let mut groups: Vec<(&str, usize, Vec<SceneSample>)> = vec![
        ("train", 0, corpus.train_crowd),
        ("train", 0, corpus.train_background),
        ("test", cfg.corpus.test_indices().start, corpus.test_crowd),
    ];
    if cfg.noisy_test {
        let heavy = cfg.corpus.distractor_heavy();
        let scenes = heavy
            .test_indices()
            .map(|i| synth_scene(&heavy, i, Label::Crowd))
            .collect::<adcrowd::Result<Vec<_>>>()?;
        groups.push((Split::TestNoisy.dir(), heavy.test_indices().start, scenes));
    }
    let mut manifest = Vec::new();
    for (split, first, samples) in groups {
        for (i, s) in samples.iter().enumerate() {
            let entry = entry_for(split, s.label, first + i);
            write(&dir.join(&entry.image), write_pgm(&s.image)?)?;
            write(&dir.join(&entry.dmap), write_dmap(&s.gt_density))?;
            manifest.push(entry);
        }
    }
    write(&dir.join(MANIFEST), format_manifest(&manifest))?;
    write_resolved(cfg, out, "synth")?;
    println!("wrote {} samples to {}", manifest.len(), dir.display());
    Ok(())
}

/// Samples of one split (and optionally one label) from a corpus on disk.
/// Head positions are not stored, so loaded samples carry an empty head
/// list; counts come from the density maps.
fn load_split(cfg: &RunConfig, out: &Path, split: &str, label: Option<Label>) -> Result<Vec<SceneSample>, CliError> {
    let dir = cfg.corpus_dir(out);
    let manifest_path = dir.join(MANIFEST);
    require(&manifest_path, "corpus manifest (run `adcrowd synth` first)")?;
    let text = String::from_utf8(read(&manifest_path)?)
        .map_err(|_| CliError::Format(format!("{}: not UTF-8", manifest_path.display())))?;
    let entries = parse_manifest(&text)?;
    let mut samples = Vec::new();
    for e in entries.iter().filter(|e| e.split() == split && label.is_none_or(|l| l == e.label)) {
        let at = |p: &Path, err: adcrowd::Error| CliError::Format(format!("{}: {err}", p.display()));
        let image_path = dir.join(&e.image);
        let dmap_path = dir.join(&e.dmap);
        let image = read_pgm(&read(&image_path)?).map_err(|err| at(&image_path, err))?;
        let gt_density = read_dmap(&read(&dmap_path)?).map_err(|err| at(&dmap_path, err))?;
        samples.push(SceneSample {
            image,
            heads: Vec::new(),
            gt_density,
            label: e.label,
        });
    }
    if samples.is_empty() {
        return Err(CliError::Format(format!(
            "corpus {} has no {split} samples",
            dir.display()
        )));
    }
    Ok(samples)
}

fn load_amg(path: &Path) -> Result<AmgNetwork, CliError> {
    require(path, "AMG checkpoint")?;
    let mut net = AmgNetwork::build(0);
    net.params.load_checkpoint(&read(path)?)?;
    Ok(net)
}

fn load_dme(path: &Path) -> Result<DmeNetwork, CliError> {
    require(path, "DME checkpoint")?;
    let mut net = DmeNetwork::build(0);
    net.params.load_checkpoint(&read(path)?)?;
    Ok(net)
}

/// The AMG the configured variant needs, or an existing one for reporting.
fn amg_for(cfg: &RunConfig, out: &Path, optional: bool) -> Result<Option<AmgNetwork>, CliError> {
    let path = cfg.amg_checkpoint(out);
    if cfg.variant.kind.uses_attention() || (!optional && path.exists()) {
        load_amg(&path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn train_amg(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let crowd = load_split(cfg, out, "train", Some(Label::Crowd))?;
    let background = load_split(cfg, out, "train", Some(Label::Background))?;
    let mut net = AmgNetwork::build(cfg.train.rng_seed);
    let history = fit_amg(&mut net, &crowd, &background, &cfg.train)?;
    write(&out.join("amg.ckpt"), write_checkpoint(&net.params))?;
    write_loss(&out.join("amg_loss.txt"), &history)?;
    write_resolved(cfg, out, "train-amg")?;
    let mut all = crowd;
    all.extend(background);
    println!(
        "trained AMG for {} epochs: final loss {:.6}, training accuracy {:.4}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        classification_accuracy(&net, &all)?
    );
    Ok(())
}

pub fn train_dme(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let amg = amg_for(cfg, out, true)?;
    let crowd = load_split(cfg, out, "train", Some(Label::Crowd))?;
    let mut net = DmeNetwork::build(cfg.train.rng_seed);
    let history = fit_dme(&mut net, &crowd, &cfg.variant, amg.as_ref(), &cfg.train)?;
    write(&out.join("dme.ckpt"), write_checkpoint(&net.params))?;
    write_loss(&out.join("dme_loss.txt"), &history)?;
    write_resolved(cfg, out, "train-dme")?;
    println!(
        "trained {} for {} epochs: final loss {:.6}",
        cfg.variant.kind,
        history.len(),
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let samples = load_split(cfg, out, cfg.split.dir(), None)?;
    let report = if cfg.oracle {
        evaluate_oracle(&samples)?
    } else {
        let dme = load_dme(&cfg.dme_checkpoint(out))?;
        let amg = amg_for(cfg, out, !(cfg.write_attention || cfg.sweep))?;
        let result = evaluate(&dme, amg.as_ref(), &cfg.variant, &samples)?;
        let first = match cfg.split {
            crate::config::Split::Test | crate::config::Split::TestNoisy => cfg.corpus.test_indices().start,
        };
        for (i, p) in result.predictions.iter().enumerate() {
            let stem = format!("{:05}", first + i);
            if cfg.write_predictions {
                write(&out.join("predictions").join(format!("{stem}.dmap")), write_dmap(&p.density))?;
            }
            if let (true, Some(b)) = (cfg.write_attention, &p.attention) {
                write(&out.join("attention").join(format!("{stem}.pgm")), write_pgm(&b.attention)?)?;
            }
        }
        if cfg.sweep {
            let amg = amg.as_ref().ok_or_else(|| CliError::Missing {
                what: "AMG checkpoint",
                path: cfg.amg_checkpoint(out),
            })?;
            let rows = threshold_sweep(&dme, amg, &samples, &SWEEP_THRESHOLDS)?;
            let table = format_table(&rows);
            write(&out.join("sweep.txt"), &table)?;
            print!("{table}");
        }
        result.report
    };
    write(&out.join("report.txt"), report.to_text())?;
    write_resolved(cfg, out, "eval")?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn infer(cfg: &RunConfig, out: &Path, image_path: &Path) -> Result<(), CliError> {
    let image = read_pgm(&read(image_path)?)
        .map_err(|e| CliError::Format(format!("{}: {e}", image_path.display())))?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if h % 4 != 0 || w % 4 != 0 || h < 16 || w < 16 {
        return Err(CliError::Format(format!(
            "{}: image is {w}x{h}; width and height must be multiples of 4 and at least 16",
            image_path.display()
        )));
    }
    let dme = load_dme(&cfg.dme_checkpoint(out))?;
    let amg = amg_for(cfg, out, false)?;
    let p = predict(&dme, amg.as_ref(), &cfg.variant, &image)?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    write(&out.join(format!("{stem}.dmap")), write_dmap(&p.density))?;
    println!("count={:.4}", count_from_density(&p.density));
    if let Some(b) = &p.attention {
        write(&out.join(format!("{stem}_attention.pgm")), write_pgm(&b.attention)?)?;
        let (label, prob) = if b.pc >= b.pb {
            (Label::Crowd, b.pc)
        } else {
            (Label::Background, b.pb)
        };
        println!("label={} probability={prob:.4}", label.as_str());
    }
    write_resolved(cfg, out, "infer")?;
    Ok(())
}

pub fn gradcheck(inject_fault: bool) -> Result<(), CliError> {
    let report = run_suite(&SuiteOptions {
        inject_fault,
        ..SuiteOptions::default()
    })?;
    print!("{}", report.to_table());
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        Err(CliError::Gradcheck(names.join(", ")))
    }
}
