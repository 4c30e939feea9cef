//! Experiment configuration: a line-oriented, sectioned key=value file that
//! round-trips losslessly through [`ExperimentConfig::to_file_string`] and
//! [`parse_config`].

use std::path::{Path, PathBuf};

use sparsedistill::distill::DistillConfig;
use sparsedistill::error::{Error, Result};
use sparsedistill::retrain::OptimConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        per_class: usize,
        shape: Vec<usize>,
        delta: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        val_fraction: f64,
        split_seed: u64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        shape: Vec<usize>,
        has_header: bool,
        val_fraction: f64,
        split_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSection {
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl DistillSection {
    pub fn to_distill_config(&self) -> Result<DistillConfig> {
        DistillConfig::new(self.temperature, self.alpha, self.beta)?.with_epsilon(self.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub teacher_arch: String,
    pub student_arch: String,
    pub finetune: DistillSection,
    pub score: DistillSection,
    pub gamma: f64,
    pub score_epochs: usize,
    pub retrain: DistillSection,
    pub sparsities: Vec<f64>,
    pub lr: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub teacher_epochs: usize,
    pub finetune_epochs: usize,
    pub retrain_epochs: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub precision: u32,
    pub efficiency: bool,
}

impl ExperimentConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            lr_final: self.lr_final,
            momentum: self.momentum,
            batch_size: self.batch_size,
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        s.push_str("[dataset]\n");
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                per_class,
                shape,
                delta,
                seed,
            } => {
                s.push_str("kind = synthetic\n");
                s.push_str(&format!("classes = {classes}\n"));
                s.push_str(&format!("per_class = {per_class}\n"));
                s.push_str(&format!("shape = {}\n", fmt_shape(shape)));
                s.push_str(&format!("delta = {delta}\n"));
                s.push_str(&format!("seed = {seed}\n"));
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                val_fraction,
                split_seed,
            } => {
                s.push_str("kind = idx\n");
                s.push_str(&format!("train_images = {}\n", train_images.display()));
                s.push_str(&format!("train_labels = {}\n", train_labels.display()));
                s.push_str(&format!("test_images = {}\n", test_images.display()));
                s.push_str(&format!("test_labels = {}\n", test_labels.display()));
                s.push_str(&format!("val_fraction = {val_fraction}\n"));
                s.push_str(&format!("split_seed = {split_seed}\n"));
            }
            DatasetSpec::Csv {
                train,
                test,
                shape,
                has_header,
                val_fraction,
                split_seed,
            } => {
                s.push_str("kind = csv\n");
                s.push_str(&format!("train = {}\n", train.display()));
                s.push_str(&format!("test = {}\n", test.display()));
                s.push_str(&format!("shape = {}\n", fmt_shape(shape)));
                s.push_str(&format!("has_header = {has_header}\n"));
                s.push_str(&format!("val_fraction = {val_fraction}\n"));
                s.push_str(&format!("split_seed = {split_seed}\n"));
            }
        }
        s.push_str("\n[models]\n");
        s.push_str(&format!("teacher = {}\n", self.teacher_arch));
        s.push_str(&format!("student = {}\n", self.student_arch));

        for (name, d) in [
            ("finetune", &self.finetune),
            ("score", &self.score),
            ("retrain", &self.retrain),
        ] {
            s.push_str(&format!("\n[distill.{name}]\n"));
            s.push_str(&format!("temperature = {}\n", d.temperature));
            s.push_str(&format!("alpha = {}\n", d.alpha));
            s.push_str(&format!("beta = {}\n", d.beta));
            s.push_str(&format!("epsilon = {}\n", d.epsilon));
            if name == "score" {
                s.push_str(&format!("gamma = {}\n", self.gamma));
                s.push_str(&format!("epochs = {}\n", self.score_epochs));
            }
        }

        s.push_str("\n[prune]\n");
        s.push_str(&format!(
            "sparsity = {}\n",
            self.sparsities
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));

        s.push_str("\n[optim]\n");
        s.push_str(&format!("lr = {}\n", self.lr));
        s.push_str(&format!("lr_final = {}\n", self.lr_final));
        s.push_str(&format!("momentum = {}\n", self.momentum));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("teacher_epochs = {}\n", self.teacher_epochs));
        s.push_str(&format!("finetune_epochs = {}\n", self.finetune_epochs));
        s.push_str(&format!("retrain_epochs = {}\n", self.retrain_epochs));
        s.push_str(&format!("warmup_epochs = {}\n", self.warmup_epochs));
        s.push_str(&format!("patience = {}\n", self.patience));

        s.push_str("\n[run]\n");
        s.push_str(&format!(
            "seeds = {}\n",
            self.seeds
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        s.push_str(&format!("out = {}\n", self.out.display()));
        s.push_str(&format!("precision = {}\n", self.precision));
        s.push_str(&format!("efficiency = {}\n", self.efficiency));
        s
    }
}

fn fmt_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

// ── Parser ──────────────────────────────────────────────────────────────

struct Section {
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
    consumed: Vec<bool>,
}

struct Parsed {
    sections: Vec<Section>,
}

impl Parsed {
    fn section(&mut self, name: &str) -> Result<&mut Section> {
        self.sections
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::config(format!("missing section [{name}]")))
    }

}

impl Section {
    fn take(&mut self, key: &str) -> Option<String> {
        for (i, (k, v, _)) in self.entries.iter().enumerate() {
            if k == key && !self.consumed[i] {
                self.consumed[i] = true;
                return Some(v.clone());
            }
        }
        None
    }

    fn required(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| {
            Error::config(format!("missing key {key:?} in section [{}]", self.name))
        })
    }

    fn leftovers(&self) -> Option<(String, usize)> {
        self.entries
            .iter()
            .zip(&self.consumed)
            .find(|(_, &c)| !c)
            .map(|((k, _, line), _)| (k.clone(), *line))
    }
}

fn tokenize(text: &str) -> Result<Parsed> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(Error::config(format!(
                    "line {line_no}: unterminated section header {line:?}"
                )));
            };
            sections.push(Section {
                name: name.trim().to_string(),
                line: line_no,
                entries: Vec::new(),
                consumed: Vec::new(),
            });
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {line_no}: expected key = value, got {line:?}"
            )));
        };
        let Some(section) = sections.last_mut() else {
            return Err(Error::config(format!(
                "line {line_no}: key outside any [section]"
            )));
        };
        section
            .entries
            .push((k.trim().to_string(), v.trim().to_string(), line_no));
        section.consumed.push(false);
    }
    Ok(Parsed { sections })
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::config(format!("invalid {what}: {s:?}")))
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| parse_num::<usize>(d.trim(), "shape extent"))
        .collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| parse_num::<T>(v.trim(), what))
        .collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(format!("expected true/false, got {other:?}"))),
    }
}

fn parse_distill_section(sec: &mut Section) -> Result<DistillSection> {
    let d = DistillSection {
        temperature: parse_num(&sec.required("temperature")?, "temperature")?,
        alpha: parse_num(&sec.required("alpha")?, "alpha")?,
        beta: parse_num(&sec.required("beta")?, "beta")?,
        epsilon: match sec.take("epsilon") {
            Some(v) => parse_num(&v, "epsilon")?,
            None => 1e-6,
        },
    };
    // Surface range errors at parse time rather than mid-run.
    d.to_distill_config()?;
    Ok(d)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut parsed = tokenize(text)?;

    let dataset = {
        let sec = parsed.section("dataset")?;
        match sec.required("kind")?.as_str() {
            "synthetic" => DatasetSpec::Synthetic {
                classes: parse_num(&sec.required("classes")?, "classes")?,
                per_class: parse_num(&sec.required("per_class")?, "per_class")?,
                shape: parse_shape(&sec.required("shape")?)?,
                delta: parse_num(&sec.required("delta")?, "delta")?,
                seed: parse_num(&sec.required("seed")?, "seed")?,
            },
            "idx" => DatasetSpec::Idx {
                train_images: PathBuf::from(sec.required("train_images")?),
                train_labels: PathBuf::from(sec.required("train_labels")?),
                test_images: PathBuf::from(sec.required("test_images")?),
                test_labels: PathBuf::from(sec.required("test_labels")?),
                val_fraction: match sec.take("val_fraction") {
                    Some(v) => parse_num(&v, "val_fraction")?,
                    None => 0.1,
                },
                split_seed: match sec.take("split_seed") {
                    Some(v) => parse_num(&v, "split_seed")?,
                    None => 0,
                },
            },
            "csv" => DatasetSpec::Csv {
                train: PathBuf::from(sec.required("train")?),
                test: PathBuf::from(sec.required("test")?),
                shape: parse_shape(&sec.required("shape")?)?,
                has_header: match sec.take("has_header") {
                    Some(v) => parse_bool(&v)?,
                    None => false,
                },
                val_fraction: match sec.take("val_fraction") {
                    Some(v) => parse_num(&v, "val_fraction")?,
                    None => 0.1,
                },
                split_seed: match sec.take("split_seed") {
                    Some(v) => parse_num(&v, "split_seed")?,
                    None => 0,
                },
            },
            other => {
                return Err(Error::config(format!(
                    "unknown dataset kind {other:?}; expected synthetic, idx, or csv"
                )))
            }
        }
    };

    let (teacher_arch, student_arch) = {
        let sec = parsed.section("models")?;
        (sec.required("teacher")?, sec.required("student")?)
    };

    let finetune = parse_distill_section(parsed.section("distill.finetune")?)?;
    let (score, gamma, score_epochs) = {
        let sec = parsed.section("distill.score")?;
        let d = parse_distill_section(sec)?;
        let gamma = match sec.take("gamma") {
            Some(v) => parse_num(&v, "gamma")?,
            None => 0.9,
        };
        let epochs = match sec.take("epochs") {
            Some(v) => parse_num(&v, "scoring epochs")?,
            None => 3,
        };
        (d, gamma, epochs)
    };
    let retrain = parse_distill_section(parsed.section("distill.retrain")?)?;

    let sparsities = {
        let sec = parsed.section("prune")?;
        parse_list::<f64>(&sec.required("sparsity")?, "sparsity")?
    };

    let (lr, lr_final, momentum, batch_size, teacher_epochs, finetune_epochs, retrain_epochs, warmup_epochs, patience) = {
        let sec = parsed.section("optim")?;
        (
            parse_num(&sec.required("lr")?, "lr")?,
            match sec.take("lr_final") {
                Some(v) => parse_num(&v, "lr_final")?,
                None => 0.001,
            },
            match sec.take("momentum") {
                Some(v) => parse_num(&v, "momentum")?,
                None => 0.9,
            },
            parse_num(&sec.required("batch_size")?, "batch_size")?,
            parse_num(&sec.required("teacher_epochs")?, "teacher_epochs")?,
            parse_num(&sec.required("finetune_epochs")?, "finetune_epochs")?,
            parse_num(&sec.required("retrain_epochs")?, "retrain_epochs")?,
            match sec.take("warmup_epochs") {
                Some(v) => parse_num(&v, "warmup_epochs")?,
                None => 1,
            },
            match sec.take("patience") {
                Some(v) => parse_num(&v, "patience")?,
                None => 5,
            },
        )
    };

    let (seeds, out, precision, efficiency) = {
        let sec = parsed.section("run")?;
        let seeds = parse_list::<u64>(&sec.required("seeds")?, "seed")?;
        let out = PathBuf::from(sec.required("out")?);
        let precision = match sec.take("precision") {
            Some(v) => parse_num(&v, "precision")?,
            None => 32,
        };
        let efficiency = match sec.take("efficiency") {
            Some(v) => parse_bool(&v)?,
            None => false,
        };
        (seeds, out, precision, efficiency)
    };

    if precision != 32 && precision != 64 {
        return Err(Error::config(format!(
            "precision must be 32 or 64, got {precision}"
        )));
    }

    // Reject typos instead of silently ignoring them.
    const KNOWN: [&str; 8] = [
        "dataset",
        "models",
        "distill.finetune",
        "distill.score",
        "distill.retrain",
        "prune",
        "optim",
        "run",
    ];
    for sec in &parsed.sections {
        if !KNOWN.contains(&sec.name.as_str()) {
            return Err(Error::config(format!(
                "unknown section [{}] (line {})",
                sec.name, sec.line
            )));
        }
        if let Some((key, line)) = sec.leftovers() {
            return Err(Error::config(format!(
                "unknown key {key:?} in section [{}] (line {line})",
                sec.name
            )));
        }
    }
    let cfg = ExperimentConfig {
        dataset,
        teacher_arch,
        student_arch,
        finetune,
        score,
        gamma,
        score_epochs,
        retrain,
        sparsities,
        lr,
        lr_final,
        momentum,
        batch_size,
        teacher_epochs,
        finetune_epochs,
        retrain_epochs,
        warmup_epochs,
        patience,
        seeds,
        out,
        precision,
        efficiency,
    };
    if !(0.0..1.0).contains(&cfg.gamma) {
        return Err(Error::config(format!(
            "gamma must be in [0,1), got {}",
            cfg.gamma
        )));
    }
    for &p in &cfg.sparsities {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("sparsity {p} outside [0,1)")));
        }
    }
    for (i, &s) in cfg.seeds.iter().enumerate() {
        if cfg.seeds[i + 1..].contains(&s) {
            return Err(Error::config(format!("duplicate seed {s} in [run] seeds")));
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                classes: 10,
                per_class: 200,
                shape: vec![1, 28, 28],
                delta: 2.0,
                seed: 0,
            },
            teacher_arch: "cnn-teacher".into(),
            student_arch: "cnn-small".into(),
            finetune: DistillSection {
                temperature: 3.0,
                alpha: 0.7,
                beta: 0.5,
                epsilon: 1e-6,
            },
            score: DistillSection {
                temperature: 5.0,
                alpha: 0.7,
                beta: 0.5,
                epsilon: 1e-6,
            },
            gamma: 0.9,
            score_epochs: 3,
            retrain: DistillSection {
                temperature: 3.0,
                alpha: 0.7,
                beta: 0.5,
                epsilon: 1e-6,
            },
            sparsities: vec![0.9, 0.95],
            lr: 0.01,
            lr_final: 0.001,
            momentum: 0.9,
            batch_size: 32,
            teacher_epochs: 20,
            finetune_epochs: 20,
            retrain_epochs: 30,
            warmup_epochs: 1,
            patience: 5,
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs/bench"),
            precision: 32,
            efficiency: false,
        }
    }

    #[test]
    fn config_round_trips_losslessly() {
        let cfg = sample();
        let text = cfg.to_file_string();
        let parsed = parse_config(&text).unwrap();
        assert_eq!(cfg, parsed);
        // And a second round trip produces identical text.
        assert_eq!(text, parsed.to_file_string());
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let mut text = sample().to_file_string();
        text.push_str("typo_key = 3\n");
        let err = parse_config(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("typo_key"), "{msg}");
    }

    #[test]
    fn missing_section_is_config_error() {
        let text = "[dataset]\nkind = synthetic\nclasses = 2\nper_class = 5\nshape = 4\ndelta = 1.0\nseed = 0\n";
        let err = parse_config(text).unwrap_err();
        assert!(err.to_string().contains("[models]"), "{err}");
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let mut cfg = sample();
        cfg.seeds = vec![1, 2, 1];
        let err = parse_config(&cfg.to_file_string()).unwrap_err();
        assert!(err.to_string().contains("duplicate seed"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut text = String::from("# experiment\n\n");
        text.push_str(&sample().to_file_string());
        assert!(parse_config(&text).is_ok());
    }
}
