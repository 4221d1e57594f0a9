//! Run configuration: `key = value` file merged with `--key value` overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sketchgen::data::{SplitPreset, SplitRule};
use sketchgen::losses::KlEstimator;
use sketchgen::model::{ModelConfig, Variant};
use sketchgen::nn::LrSchedule;
use sketchgen::retrieval::RetrievalConfig;
use sketchgen::trainer::TrainConfig;

pub const KEYS: &[&str] = &[
    "data",
    "images",
    "sketches",
    "split",
    "split_seed",
    "out",
    "checkpoint",
    "resume",
    "seed",
    "variant",
    "latent_dim",
    "flow_steps",
    "context_dim",
    "prior_scale",
    "prior_scale_is_variance",
    "encoder_widths",
    "decoder_widths",
    "regressor_widths",
    "made_widths",
    "gate_bias",
    "epochs",
    "batch_size",
    "pairs_per_class",
    "beta",
    "lambda_r",
    "lambda_c",
    "lambda_reg",
    "lambda_e",
    "lr_schedule",
    "kl_estimator",
    "kl_samples",
    "eval_every",
    "log_wall_time",
    "candidates",
    "k",
    "retrieval_seed",
    "include_seen",
    "top",
    "seeds",
];

/// Where a setting came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    File(PathBuf, usize),
    Flag,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::File(p, line) => write!(f, "{}:{line}", p.display()),
            Source::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub source: Source,
}

/// Parses a config file body. Blank lines and `#` comments are skipped.
pub fn parse_file(text: &str, path: &Path) -> (Vec<Entry>, Vec<String>) {
    let mut entries = Vec::new();
    let mut problems = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let source = Source::File(path.to_path_buf(), i + 1);
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => entries.push(Entry {
                key: normalize_key(k.trim()),
                value: v.trim().to_string(),
                source,
            }),
            _ => problems.push(format!("{source}: expected 'key = value', got '{line}'")),
        }
    }
    (entries, problems)
}

fn normalize_key(k: &str) -> String {
    k.replace('-', "_")
}

/// Splits `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> (Vec<Entry>, Vec<String>) {
    let mut entries = Vec::new();
    let mut problems = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            problems.push(format!("unexpected argument '{arg}'"));
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match it.next_if(|v| !v.starts_with("--")) {
                Some(v) => (flag.to_string(), v.clone()),
                None => {
                    problems.push(format!("--{flag} needs a value"));
                    continue;
                }
            },
        };
        entries.push(Entry {
            key: normalize_key(&key),
            value,
            source: Source::Flag,
        });
    }
    (entries, problems)
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub sketches: Option<PathBuf>,
    pub split: SplitRule,
    pub split_seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Model, training and pairing seed.
    pub seed: u64,
    /// Feature widths are zero until data is loaded.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    /// Rows per query in a ranking dump; 0 dumps everything.
    pub top: usize,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            images: None,
            sketches: None,
            split: SplitRule::Count(5),
            split_seed: 0,
            out: PathBuf::from("run"),
            checkpoint: None,
            resume: None,
            seed: 0,
            model: ModelConfig::desk(0, 0),
            train: TrainConfig {
                pairs_per_class: 200,
                ..TrainConfig::default()
            },
            retrieval: RetrievalConfig::default(),
            top: 0,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

pub fn parse_split(s: &str) -> Result<SplitRule, String> {
    if let Some(n) = s.strip_prefix("count:") {
        return n.trim().parse().map(SplitRule::Count).map_err(|_| format!("bad class count '{n}'"));
    }
    if let Some(f) = s.strip_prefix("fraction:") {
        return f.trim().parse().map(SplitRule::Fraction).map_err(|_| format!("bad fraction '{f}'"));
    }
    if let Some(list) = s.strip_prefix("classes:") {
        return parse_list(list).map(SplitRule::Explicit);
    }
    SplitPreset::from_str(s).map(SplitRule::Preset).map_err(|_| {
        let presets: Vec<&str> = SplitPreset::ALL.iter().map(|p| p.name()).collect();
        format!(
            "unknown split '{s}' (expected {}, count:N, fraction:F or classes:a,b,..)",
            presets.join(", ")
        )
    })
}

pub fn render_split(rule: &SplitRule) -> String {
    match rule {
        SplitRule::Count(n) => format!("count:{n}"),
        SplitRule::Fraction(f) => format!("fraction:{f:?}"),
        SplitRule::Explicit(ids) => format!("classes:{}", join(ids)),
        SplitRule::Preset(p) => p.to_string(),
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| format!("bad list item '{p}'")))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got '{s}'")),
    }
}

fn num<T: FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad number '{s}'"))
}

impl RunConfig {
    /// Reads `config` (if any), then applies `overrides`. Returns the
    /// config together with every problem found.
    pub fn load(config: Option<&Path>, overrides: &[String]) -> (Self, Vec<String>) {
        let mut entries = Vec::new();
        let mut problems = Vec::new();
        if let Some(path) = config {
            match std::fs::read_to_string(path) {
                Ok(text) => {
                    let (e, p) = parse_file(&text, path);
                    entries.extend(e);
                    problems.extend(p);
                }
                Err(e) => problems.push(format!("cannot read config {}: {e}", path.display())),
            }
        }
        let (e, p) = parse_overrides(overrides);
        entries.extend(e);
        problems.extend(p);
        let mut cfg = RunConfig::default();
        problems.extend(cfg.apply(&entries));
        problems.extend(cfg.problems());
        (cfg, problems)
    }

    /// Applies entries in order, later ones winning. Command-line `k`
    /// values accumulate and replace any `k` from the file.
    pub fn apply(&mut self, entries: &[Entry]) -> Vec<String> {
        let mut problems = Vec::new();
        let mut flag_ks: Vec<usize> = Vec::new();
        for e in entries {
            if !KEYS.contains(&e.key.as_str()) {
                problems.push(format!("{}: unknown key '{}'", e.source, e.key));
                continue;
            }
            if e.key == "k" && e.source == Source::Flag {
                match parse_list::<usize>(&e.value) {
                    Ok(ks) => flag_ks.extend(ks),
                    Err(msg) => problems.push(format!("{}: k: {msg}", e.source)),
                }
                continue;
            }
            if let Err(msg) = self.set(&e.key, &e.value) {
                problems.push(format!("{}: {}: {msg}", e.source, e.key));
            }
        }
        if !flag_ks.is_empty() {
            self.retrieval.ks = flag_ks;
        }
        problems
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data" => self.data = Some(PathBuf::from(v)),
            "images" => self.images = Some(PathBuf::from(v)),
            "sketches" => self.sketches = Some(PathBuf::from(v)),
            "split" => self.split = parse_split(v)?,
            "split_seed" => self.split_seed = num(v)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "resume" => self.resume = Some(PathBuf::from(v)),
            "seed" => self.seed = num(v)?,
            "variant" => m.variant = v.parse::<Variant>().map_err(|e| e.to_string())?,
            "latent_dim" => m.latent_dim = num(v)?,
            "flow_steps" => m.flow_steps = num(v)?,
            "context_dim" => m.context_dim = num(v)?,
            "prior_scale" => m.prior_scale = num(v)?,
            "prior_scale_is_variance" => m.prior_scale_is_variance = parse_bool(v)?,
            "encoder_widths" => m.encoder_widths = parse_list(v)?,
            "decoder_widths" => m.decoder_widths = parse_list(v)?,
            "regressor_widths" => m.regressor_widths = parse_list(v)?,
            "made_widths" => m.made_widths = parse_list(v)?,
            "gate_bias" => m.gate_bias = num(v)?,
            "epochs" => t.epochs = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "pairs_per_class" => t.pairs_per_class = num(v)?,
            "beta" => t.weights.beta = num(v)?,
            "lambda_r" => t.weights.lambda_r = num(v)?,
            "lambda_c" => t.weights.lambda_c = num(v)?,
            "lambda_reg" => t.weights.lambda_reg = num(v)?,
            "lambda_e" => t.weights.lambda_e = num(v)?,
            "lr_schedule" => t.schedule = v.parse::<LrSchedule>().map_err(|e| e.to_string())?,
            "kl_estimator" => t.kl_estimator = v.parse::<KlEstimator>().map_err(|e| e.to_string())?,
            "kl_samples" => t.kl_samples = num(v)?,
            "eval_every" => t.eval_every = num(v)?,
            "log_wall_time" => t.log_wall_time = parse_bool(v)?,
            "candidates" => self.retrieval.candidates = num(v)?,
            "k" => self.retrieval.ks = parse_list(v)?,
            "retrieval_seed" => self.retrieval.seed = num(v)?,
            "include_seen" => self.retrieval.include_seen = parse_bool(v)?,
            "top" => self.top = num(v)?,
            "seeds" => self.seeds = parse_list(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Constraint violations that do not depend on the data.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.model_for(1, 1).problems());
        out.extend(self.train.problems());
        out.extend(self.retrieval.problems());
        if self.data.is_some() && (self.images.is_some() || self.sketches.is_some()) {
            out.push("give either data (a manifest) or images + sketches, not both".into());
        }
        if self.data.is_none() && self.images.is_some() != self.sketches.is_some() {
            out.push("images and sketches must be given together".into());
        }
        match &self.split {
            SplitRule::Fraction(f) if !(*f > 0.0 && *f < 1.0) => out.push(format!("split fraction must be in (0, 1), got {f}")),
            SplitRule::Count(0) => out.push("split count must be at least 1".into()),
            SplitRule::Explicit(ids) if ids.is_empty() => out.push("split class list is empty".into()),
            _ => {}
        }
        if self.seeds.is_empty() {
            out.push("seeds must list at least one seed".into());
        }
        out
    }

    /// The model config with variant constraints applied and the given
    /// feature widths.
    pub fn model_for(&self, feature_dim: usize, attr_dim: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            attr_dim,
            ..self.model.clone()
        }
        .normalized()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Round-trippable `key = value` text of every setting.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let w = &t.weights;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines: Vec<(&str, Option<String>)> = vec![
            ("data", path(&self.data)),
            ("images", path(&self.images)),
            ("sketches", path(&self.sketches)),
            ("split", Some(render_split(&self.split))),
            ("split_seed", Some(self.split_seed.to_string())),
            ("seed", Some(self.seed.to_string())),
            ("variant", Some(m.variant.to_string())),
            ("latent_dim", Some(m.latent_dim.to_string())),
            ("flow_steps", Some(m.flow_steps.to_string())),
            ("context_dim", Some(m.context_dim.to_string())),
            ("prior_scale", Some(format!("{:?}", m.prior_scale))),
            ("prior_scale_is_variance", Some(m.prior_scale_is_variance.to_string())),
            ("encoder_widths", Some(join(&m.encoder_widths))),
            ("decoder_widths", Some(join(&m.decoder_widths))),
            ("regressor_widths", Some(join(&m.regressor_widths))),
            ("made_widths", Some(join(&m.made_widths))),
            ("gate_bias", Some(format!("{:?}", m.gate_bias))),
            ("epochs", Some(t.epochs.to_string())),
            ("batch_size", Some(t.batch_size.to_string())),
            ("pairs_per_class", Some(t.pairs_per_class.to_string())),
            ("beta", Some(format!("{:?}", w.beta))),
            ("lambda_r", Some(format!("{:?}", w.lambda_r))),
            ("lambda_c", Some(format!("{:?}", w.lambda_c))),
            ("lambda_reg", Some(format!("{:?}", w.lambda_reg))),
            ("lambda_e", Some(format!("{:?}", w.lambda_e))),
            ("lr_schedule", Some(t.schedule.to_string())),
            ("kl_estimator", Some(t.kl_estimator.to_string())),
            ("kl_samples", Some(t.kl_samples.to_string())),
            ("eval_every", Some(t.eval_every.to_string())),
            ("log_wall_time", Some(t.log_wall_time.to_string())),
            ("candidates", Some(self.retrieval.candidates.to_string())),
            ("k", Some(join(&self.retrieval.ks))),
            ("retrieval_seed", Some(self.retrieval.seed.to_string())),
            ("include_seen", Some(self.retrieval.include_seen.to_string())),
        ];
        lines.retain(|(_, v)| v.is_some());
        let mut s = String::new();
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {}", v.unwrap());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn file_then_flags() {
        let text = "# comment\nepochs = 3  # trailing\nvariant = no-iaf\nk = 10,20\n\n";
        let (entries, problems) = parse_file(text, Path::new("run.cfg"));
        assert!(problems.is_empty());
        let mut cfg = RunConfig::default();
        let mut all = entries;
        all.extend(parse_overrides(&args("--epochs 7 --k 5 --k=50 --lambda-c 0.2")).0);
        assert!(cfg.apply(&all).is_empty());
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.variant, Variant::NoIaf);
        assert_eq!(cfg.retrieval.ks, vec![5, 50]);
        assert_eq!(cfg.train.weights.lambda_c, 0.2);
    }

    #[test]
    fn every_problem_is_reported() {
        let (_, err) = RunConfig::load(None, &args("--bogus 1 --epochs x --batch-size 0 --split count:0 --candidates 0"));
        assert_eq!(err.len(), 5, "{err:?}");
        assert!(err.iter().any(|e| e.contains("unknown key 'bogus'")));
    }

    #[test]
    fn malformed_lines_and_dangling_flags() {
        let (_, p) = parse_file("just words\n= 3\n", Path::new("x"));
        assert_eq!(p.len(), 2);
        let (_, p) = parse_overrides(&args("stray --epochs"));
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn split_rules() {
        assert_eq!(parse_split("count:4").unwrap(), SplitRule::Count(4));
        assert_eq!(parse_split("fraction:0.25").unwrap(), SplitRule::Fraction(0.25));
        assert_eq!(parse_split("classes:1,3").unwrap(), SplitRule::Explicit(vec![1, 3]));
        assert_eq!(parse_split("tuberlin").unwrap(), SplitRule::Preset(SplitPreset::TuBerlin));
        assert!(parse_split("halves").is_err());
        for rule in [SplitRule::Count(4), SplitRule::Fraction(0.25), SplitRule::Explicit(vec![2, 7])] {
            assert_eq!(parse_split(&render_split(&rule)).unwrap(), rule);
        }
    }

    #[test]
    fn render_round_trips() {
        let (cfg, problems) = RunConfig::load(None, &args("--variant feedback-auto --decoder-widths 64,64 --seed 9 --k 7"));
        assert!(problems.is_empty());
        let text = cfg.render();
        let (entries, problems) = parse_file(&text, Path::new("r"));
        assert!(problems.is_empty());
        let mut back = RunConfig::default();
        assert!(back.apply(&entries).is_empty());
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.retrieval, cfg.retrieval);
        assert_eq!(back.seed, 9);
    }
}
