use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use maldi_core::classify::{
    augmentation_experiment, substitution_experiment, train_classifier, write_comparison_csv, ClassifierConfig,
    Condition,
};
use maldi_core::corpus::{format_sig9, make_toy_corpus};
use maldi_core::maldiffusion::{train_diffusion, DiffusionConfig};
use maldi_core::maldigan::{train_gan, GanConfig};
use maldi_core::maldivae::{self, train_vae, VaeConfig, VaeModel};
use maldi_core::pike::{metric_report, KernelConfig};
use maldi_core::spectra::{preprocess, PreprocessConfig, RawSpectrum};
use maldi_core::tensor::{Array, ModelFile};
use maldi_core::train::ConditionalGenerator;
use maldi_core::{Error, LabeledCorpus, ToyCorpusSpec};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::models::load_generator;
use crate::{Cli, Command, Experiment, ModelKind, TrainData};

pub const DEFAULT_SEED: u64 = 17;

/// Bad flag values that clap cannot see.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<Error>() {
            return match core {
                Error::Numerical(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| UsageError("--out is required".into()))?;
    match &cli.command {
        Command::Preprocess { input, config } => cmd_preprocess(input, config.as_deref(), out),
        Command::ToyCorpus { spec } => cmd_toy_corpus(spec.as_deref(), cli.seed, out),
        Command::Train { kind, data, config, epochs } => {
            cmd_train(*kind, data, config.as_deref(), cli.seed, *epochs, out)
        }
        Command::Generate { model, class, count } => {
            cmd_generate(model, class, *count, cli.seed.unwrap_or(DEFAULT_SEED), out)
        }
        Command::Metrics { real, generated, t } => cmd_metrics(real, generated, *t, out),
        Command::Experiment { kind } => cmd_experiment(kind, cli.seed, out),
        Command::ExportEmbeddings { model, corpus } => {
            cmd_export_embeddings(model, corpus, cli.seed.unwrap_or(DEFAULT_SEED), out)
        }
    }
}

/// Defaults, then the JSON file's fields, then flag overrides.
fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>, overrides: &[(&str, Value)]) -> Result<T> {
    let mut merged = serde_json::to_value(T::default())?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Value = serde_json::from_str(&text).map_err(Error::from).with_context(|| path.display().to_string())?;
        let Value::Object(fields) = file else {
            bail!(Error::InvalidInput(format!("{}: config must be a JSON object", path.display())));
        };
        merged.as_object_mut().expect("configs serialize to objects").extend(fields);
    }
    for (k, v) in overrides {
        merged[*k] = v.clone();
    }
    let cfg = serde_json::from_value(merged).map_err(Error::from);
    match path {
        Some(p) => cfg.with_context(|| p.display().to_string()),
        None => Ok(cfg?),
    }
}

fn seed_override(seed: Option<u64>) -> Vec<(&'static str, Value)> {
    seed.map(|s| ("seed", Value::from(s))).into_iter().collect()
}

fn load_corpus(path: &Path) -> Result<LabeledCorpus> {
    Ok(LabeledCorpus::load_csv(path)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| anyhow!(Error::Io { path: path.to_path_buf(), source: e }))?;
    Ok(BufWriter::new(f))
}

fn summary(corpus: &LabeledCorpus) -> String {
    let counts = corpus.class_counts();
    corpus
        .vocab()
        .iter()
        .zip(&counts)
        .map(|(n, c)| format!("{n}={c}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Label from a `<label>__<id>.txt` file name.
pub fn label_of(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    let (label, id) = stem.split_once("__")?;
    (!label.is_empty() && !id.is_empty()).then(|| label.to_string())
}

fn cmd_preprocess(input: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: PreprocessConfig = load_config(config, &[])?;
    cfg.validate()?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::Io { path: input.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(Error::InvalidInput(format!("{} contains no spectrum files", input.display())));
    }
    let mut rows = Vec::new();
    for path in &files {
        let Some(label) = label_of(path) else {
            log::warn!("skipping {}: name is not `<label>__<id>.txt`", path.display());
            continue;
        };
        match RawSpectrum::read(path).and_then(|raw| preprocess(&raw, &cfg)) {
            Ok(p) => rows.push((label, p.bins)),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if rows.is_empty() {
        bail!(Error::InvalidInput(format!("none of the {} files in {} could be processed", files.len(), input.display())));
    }
    let corpus = LabeledCorpus::from_named(rows, cfg.num_bins())?;
    corpus.save_csv(out)?;
    println!("{} spectra, {} bins: {}", corpus.len(), corpus.dim(), summary(&corpus));
    Ok(())
}

fn cmd_toy_corpus(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let spec: ToyCorpusSpec = load_config(spec, &seed_override(seed))?;
    let corpus = make_toy_corpus(&spec)?;
    corpus.save_csv(out)?;
    println!("{} spectra, {} bins: {}", corpus.len(), corpus.dim(), summary(&corpus));
    Ok(())
}

pub fn history_path(model: &Path) -> PathBuf {
    model.with_extension("history.csv")
}

fn cmd_train(
    kind: ModelKind,
    data: &TrainData,
    config: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    out: &Path,
) -> Result<()> {
    let train = load_corpus(&data.train)?;
    let val = load_corpus(&data.val)?.align_to(train.vocab())?;
    let mut overrides = seed_override(seed);
    if let Some(e) = epochs {
        overrides.push(("max_epochs", Value::from(e)));
    }
    let history = history_path(out);
    match kind {
        ModelKind::Vae => {
            let m = train_vae(&train, &val, &load_config::<VaeConfig>(config, &overrides)?)?;
            m.save(out)?;
            m.write_history_csv(&history)?;
            log::info!("vae: {} epochs", m.history.len());
        }
        ModelKind::Gan => {
            let m = train_gan(&train, &val, &load_config::<GanConfig>(config, &overrides)?)?;
            m.save(out)?;
            m.write_history_csv(&history)?;
            for w in &m.collapse_warnings {
                log::warn!("{w}");
            }
            log::info!("gan: {} epochs", m.history.len());
        }
        ModelKind::Diffusion => {
            let m = train_diffusion(&train, &val, &load_config::<DiffusionConfig>(config, &overrides)?)?;
            m.save(out)?;
            m.write_history_csv(&history)?;
            log::info!("diffusion: {} epochs", m.history.len());
        }
        ModelKind::Classifier => {
            let m = train_classifier(&train, &val, &load_config::<ClassifierConfig>(config, &overrides)?)?;
            m.save(out)?;
            m.write_history_csv(&history)?;
            log::info!("classifier: validation accuracy {:.4}", m.accuracy(&val)?);
        }
    }
    Ok(())
}

fn cmd_generate(model: &Path, class: &str, count: usize, seed: u64, out: &Path) -> Result<()> {
    if count == 0 {
        bail!(UsageError("--count must be at least 1".into()));
    }
    let generator = load_generator(model)?;
    let c = generator.class_index(class)?;
    let rows = generator.generate(c, count, seed)?;
    let corpus = LabeledCorpus::new(rows, vec![0; count], vec![class.to_string()], generator.dim())?;
    corpus.save_csv(out)?;
    Ok(())
}

fn cmd_metrics(real: &Path, generated: &Path, t: f64, out: &Path) -> Result<()> {
    let cfg = KernelConfig { t, ..Default::default() };
    cfg.validate()?;
    let real = load_corpus(real)?;
    let generated = load_corpus(generated)?;
    let report = metric_report(&real, &generated, &cfg)?;
    report.save_csv(out)?;
    Ok(())
}

fn parse_generators(specs: &[String]) -> Result<Vec<(String, Box<dyn ConditionalGenerator>)>> {
    let mut out: Vec<(String, Box<dyn ConditionalGenerator>)> = Vec::new();
    for s in specs {
        let Some((name, path)) = s.split_once('=').filter(|(n, p)| !n.is_empty() && !p.is_empty()) else {
            bail!(UsageError(format!("--generator expects name=path, got `{s}`")));
        };
        if name == "real" || out.iter().any(|(n, _)| n == name) {
            bail!(UsageError(format!("generator name `{name}` is reserved or repeated")));
        }
        out.push((name.to_string(), load_generator(Path::new(path))?));
    }
    Ok(out)
}

fn splits(data: &TrainData, test: &Path) -> Result<(LabeledCorpus, LabeledCorpus, LabeledCorpus)> {
    let train = load_corpus(&data.train)?;
    let val = load_corpus(&data.val)?.align_to(train.vocab())?;
    let test = load_corpus(test)?.align_to(train.vocab())?;
    Ok((train, val, test))
}

fn cmd_experiment(kind: &Experiment, seed: Option<u64>, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let seed_value = seed.unwrap_or(DEFAULT_SEED);
    match kind {
        Experiment::Substitution { data, test, generators, classifier_config } => {
            let (train, val, test) = splits(data, test)?;
            let cfg: ClassifierConfig = load_config(classifier_config.as_deref(), &seed_override(seed))?;
            let gens = parse_generators(generators)?;
            let refs: Vec<(&str, &dyn ConditionalGenerator)> = gens.iter().map(|(n, g)| (n.as_str(), g.as_ref())).collect();
            let conditions = substitution_experiment(&train, &val, &test, &refs, &cfg, seed_value)?;
            write_comparison_csv(&conditions, create(&out.join("comparison.csv"))?)?;
            for c in &conditions {
                c.report
                    .write_confusion_csv(create(&out.join(format!("confusion_{}.csv", c.name)))?, true)?;
                println!("{}: macro {:.2}%", c.name, c.report.macro_mean);
            }
        }
        Experiment::Augmentation { data, test, model, target, classifier_config } => {
            let (train, val, test) = splits(data, test)?;
            let cfg: ClassifierConfig = load_config(classifier_config.as_deref(), &seed_override(seed))?;
            let generator = load_generator(model)?;
            let outcome = augmentation_experiment(&train, &val, &test, generator.as_ref(), *target, &cfg, seed_value)?;
            outcome.before.write_rates_csv(create(&out.join("rates_before.csv"))?)?;
            outcome.after.write_rates_csv(create(&out.join("rates_after.csv"))?)?;
            let mut w = csv::Writer::from_writer(create(&out.join("added.csv"))?);
            w.write_record(["class", "added"])?;
            for (name, n) in train.vocab().iter().zip(&outcome.added) {
                w.write_record([name.clone(), n.to_string()])?;
            }
            w.flush()?;
            let conditions = [
                Condition { name: "before".into(), report: outcome.before.clone() },
                Condition { name: "after".into(), report: outcome.after.clone() },
            ];
            write_comparison_csv(&conditions, create(&out.join("comparison.csv"))?)?;
            println!(
                "macro {:.2}% -> {:.2}%",
                outcome.before.macro_mean, outcome.after.macro_mean
            );
        }
    }
    Ok(())
}

fn cmd_export_embeddings(model: &Path, corpus: &Path, seed: u64, out: &Path) -> Result<()> {
    let file = ModelFile::load(model)?;
    let corpus = load_corpus(corpus)?;
    let mut w = create(out)?;
    if file.model_kind == maldivae::MODEL_KIND {
        let vae = VaeModel::from_file(&file)?;
        let corpus = corpus.align_to(vae.vocab())?;
        let l = vae.config().latent_dim;
        let header: Vec<String> = std::iter::once("label".to_string()).chain((0..l).map(|j| format!("z_{j}"))).collect();
        writeln!(w, "{}", header.join(","))?;
        let idx: Vec<usize> = (0..corpus.len()).collect();
        for chunk in idx.chunks(256) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| corpus.spectra()[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| corpus.labels()[i]).collect();
            let (mu, _) = vae.encode(&Array::from_rows(&rows)?, &labels)?;
            for (row, &y) in mu.rows().zip(&labels) {
                write_row(&mut w, "", &corpus.vocab()[y], row)?;
            }
        }
    } else {
        let generator = load_generator(model)?;
        let corpus = corpus.align_to(generator.vocab())?;
        let synthetic = generator.generate_corpus(&corpus.class_counts(), seed)?;
        let header: Vec<String> = ["source".to_string(), "label".to_string()]
            .into_iter()
            .chain((0..corpus.dim()).map(|j| format!("bin_{j}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (source, set) in [("real", &corpus), ("generated", &synthetic)] {
            for (row, &y) in set.spectra().iter().zip(set.labels()) {
                write_row(&mut w, source, &set.vocab()[y], row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_row<W: Write>(w: &mut W, source: &str, label: &str, values: &[f64]) -> Result<()> {
    let mut line = String::new();
    if !source.is_empty() {
        line.push_str(source);
        line.push(',');
    }
    line.push_str(&csv_field(label));
    for v in values {
        line.push(',');
        line.push_str(&format_sig9(*v));
    }
    writeln!(w, "{line}")?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_come_from_double_underscore_names() {
        assert_eq!(label_of(Path::new("d/E_coli__0001.txt")).as_deref(), Some("E_coli"));
        assert_eq!(label_of(Path::new("a__b__c.txt")).as_deref(), Some("a"));
        assert_eq!(label_of(Path::new("nolabel.txt")), None);
        assert_eq!(label_of(Path::new("__x.txt")), None);
    }

    #[test]
    fn config_layers_defaults_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"lr": 0.5, "seed": 3}"#).unwrap();
        let c: ClassifierConfig = load_config(Some(&p), &[]).unwrap();
        assert_eq!((c.lr, c.seed, c.batch), (0.5, 3, ClassifierConfig::default().batch));
        let c: ClassifierConfig = load_config(Some(&p), &seed_override(Some(9))).unwrap();
        assert_eq!(c.seed, 9);
        std::fs::write(&p, r#"{"nope": 1}"#).unwrap();
        assert!(load_config::<ClassifierConfig>(Some(&p), &[]).is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&anyhow!(UsageError("x".into()))), 2);
        assert_eq!(exit_code(&anyhow!(Error::InvalidInput("x".into()))), 3);
        assert_eq!(exit_code(&anyhow!(Error::Numerical("nan".into())).context("training")), 4);
    }
}
