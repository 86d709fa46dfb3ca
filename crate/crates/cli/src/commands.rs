use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use postedit::data::{
    self, encode_triples, join_subwords, prepare_triples, read_lines, read_triples, tokenize, BpeModel, PrepareConfig,
    TextTriple, Vocabulary, DEFAULT_MARKER,
};
use postedit::decoding::{decode_corpus, DecodeConfig};
use postedit::error::{Error, Result};
use postedit::evaluation::{compare_corpora, score_files, Metric};
use postedit::par;
use postedit::toy::{ToyConfig, ToyTask};
use postedit::training::{average_checkpoints, load_checkpoint_dir, Checkpoint, CheckpointStore, TrainConfig, Trainer};

use crate::manifest::{beside, Recorder};
use crate::{ApplyBpe, Average, BuildVocab, CompareData, Decode, LearnBpe, Prepare, Score, Synth, Train};

const SIDES: [&str; 3] = ["src", "mt", "pe"];

fn storage(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Storage { path: path.into(), source: e }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn side_paths(prefix: &Path) -> [PathBuf; 3] {
    SIDES.map(|s| with_ext(prefix, s))
}

fn read_prefix(prefix: &Path) -> Result<Vec<TextTriple>> {
    let [s, m, p] = side_paths(prefix);
    read_triples(&s, &m, &p)
}

fn write_lines<S: AsRef<str>>(path: &Path, lines: impl IntoIterator<Item = S>) -> Result<()> {
    let file = fs::File::create(path).map_err(storage(path))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{}", l.as_ref()).map_err(storage(path))?;
    }
    w.flush().map_err(storage(path))
}

fn write_prefix(prefix: &Path, triples: &[TextTriple]) -> Result<[PathBuf; 3]> {
    let paths = side_paths(prefix);
    write_lines(&paths[0], triples.iter().map(|t| t.src.join(" ")))?;
    write_lines(&paths[1], triples.iter().map(|t| t.mt.join(" ")))?;
    write_lines(&paths[2], triples.iter().map(|t| t.pe.join(" ")))?;
    Ok(paths)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(storage(dir))
}

/// Refuses to write over any input.
fn guard(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).ok();
    for o in outputs {
        let Some(co) = canon(o) else { continue };
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&co)) {
            return Err(Error::Input(format!("output {} would overwrite an input", o.display())));
        }
    }
    Ok(())
}

pub fn learn_bpe(a: &LearnBpe) -> Result<()> {
    let inputs: Vec<&Path> = a.input.iter().map(PathBuf::as_path).collect();
    guard(&inputs, &[&a.output])?;
    let mut rec = Recorder::start("learn-bpe", &format!("merges={}\n", a.merges));
    let mut lines = Vec::new();
    for p in &a.input {
        lines.extend(read_lines(p)?);
    }
    let model = data::learn_bpe(lines.iter().map(String::as_str), a.merges)?;
    log::info!("learned {} merges from {} lines", model.merges().len(), lines.len());
    model.save(&a.output)?;
    rec.output(&a.output);
    rec.output(data::frequency_path(&a.output));
    rec.finish(&beside(&a.output))
}

pub fn apply_bpe(a: &ApplyBpe) -> Result<()> {
    guard(&[&a.input, &a.model], &[&a.output])?;
    let mut rec = Recorder::start("apply-bpe", &format!("threshold={}\n", a.threshold));
    let model = BpeModel::load(&a.model)?;
    let lines = read_lines(&a.input)?;
    let out = par::map_ordered(&lines, |l| model.apply_line(l, a.threshold).join(" "));
    write_lines(&a.output, &out)?;
    rec.output(&a.output);
    rec.finish(&beside(&a.output))
}

fn vocab_from(triples: &[TextTriple]) -> Vocabulary {
    let side = |f: fn(&TextTriple) -> &Vec<String>| triples.iter().map(f).cloned().collect::<Vec<_>>();
    data::build_vocab(&side(|t| &t.src), &side(|t| &t.mt), &side(|t| &t.pe))
}

pub fn build_vocab(a: &BuildVocab) -> Result<()> {
    let inputs = side_paths(&a.train);
    guard(&inputs.each_ref().map(PathBuf::as_path), &[&a.output])?;
    let mut rec = Recorder::start("build-vocab", "");
    let vocab = vocab_from(&read_prefix(&a.train)?);
    log::info!("vocabulary of {} tokens", vocab.len());
    vocab.save(&a.output)?;
    rec.output(&a.output);
    rec.finish(&beside(&a.output))
}

pub fn prepare(a: &Prepare) -> Result<()> {
    let outputs = side_paths(&a.output);
    let mut inputs = vec![a.src.as_path(), a.mt.as_path(), a.pe.as_path()];
    let synthetic_paths = [&a.synthetic_src, &a.synthetic_mt, &a.synthetic_pe];
    inputs.extend(synthetic_paths.iter().filter_map(|p| p.as_deref()));
    guard(&inputs, &outputs.each_ref().map(PathBuf::as_path))?;

    let cfg = PrepareConfig { max_len: a.max_len, upsample_real: a.upsample };
    let mut rec = Recorder::start("prepare", &format!("max_len={}\nupsample={}\n", a.max_len, a.upsample));
    let real = read_triples(&a.src, &a.mt, &a.pe)?;
    let synthetic = match synthetic_paths {
        [Some(s), Some(m), Some(p)] => read_triples(s, m, p)?,
        _ => Vec::new(),
    };
    let out = prepare_triples(&real, &synthetic, cfg);
    log::info!("{} real and {} synthetic triples -> {} prepared", real.len(), synthetic.len(), out.len());
    for p in write_prefix(&a.output, &out)? {
        rec.output(p);
    }
    rec.finish(&beside(&a.output))
}

pub fn train(a: &Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let train = read_prefix(&a.train)?;
    let dev = match &a.dev {
        Some(p) => read_prefix(p)?,
        None => Vec::new(),
    };
    let mut vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => vocab_from(&train),
    };
    let pe_lines: Vec<Vec<String>> = train.iter().map(|t| t.pe.clone()).collect();
    vocab.restrict_to_pe(&pe_lines);

    create_dir(&a.out_dir)?;
    let vocab_path = a.out_dir.join("vocab.txt");
    vocab.save(&vocab_path)?;
    let mut trainer = Trainer::new(cfg, vocab.pe_allowed())?;
    let cfg = trainer.cfg.clone();
    let config_path = a.out_dir.join("config.txt");
    fs::write(&config_path, cfg.to_kv()).map_err(storage(&config_path))?;

    let mut rec = Recorder::start("train", &cfg.to_kv());
    rec.seed(cfg.seed);
    log::info!(
        "training on {} triples, vocabulary {}, {} parameters",
        train.len(),
        vocab.len(),
        trainer.model.params.numel()
    );
    let ckpt_dir = a.out_dir.join("checkpoints");
    let mut store = CheckpointStore::new(&ckpt_dir, cfg.keep_last)?;
    let log_path = a.out_dir.join("loss.tsv");
    let mut log_file = BufWriter::new(fs::File::create(&log_path).map_err(storage(&log_path))?);
    let summary = trainer.run(
        &encode_triples(&train, &vocab),
        &encode_triples(&dev, &vocab),
        Some(&mut store),
        &mut log_file,
    )?;
    log::info!("finished after {} steps in {} epochs", summary.steps, summary.epochs);

    for p in [vocab_path, config_path, log_path] {
        rec.output(p);
    }
    for step in store.steps() {
        rec.output(store.step_path(step));
    }
    if store.best_perplexity().is_some() {
        rec.output(store.best_path());
    }
    rec.finish(&a.out_dir.join("manifest.json"))
}

pub fn average(a: &Average) -> Result<()> {
    let mut rec = Recorder::start("average", &format!("window={}\n", a.window));
    let ckpts = load_checkpoint_dir(&a.ckpt_dir)?;
    let averaged = average_checkpoints(&ckpts, a.window)?;
    create_dir(&a.out_dir)?;
    for (i, c) in averaged.iter().enumerate() {
        let path = a.out_dir.join(format!("avg-{}.ckpt", i + 1));
        c.save(&path)?;
        rec.output(path);
    }
    log::info!("{} checkpoints -> {} averaged models", ckpts.len(), averaged.len());
    rec.finish(&a.out_dir.join("manifest.json"))
}

pub fn decode(a: &Decode) -> Result<()> {
    let mut inputs = vec![a.src.as_path(), a.mt.as_path(), a.vocab.as_path()];
    inputs.extend(a.models.iter().map(PathBuf::as_path));
    guard(&inputs, &[&a.out])?;
    let cfg = DecodeConfig { beam: a.beam, extra_len: a.extra_len };
    let settings = format!("beam={}\nextra_len={}\njoin_bpe={}\n", a.beam, a.extra_len, a.join_bpe);
    let mut rec = Recorder::start("decode", &settings);

    let vocab = Vocabulary::load(&a.vocab)?;
    let models = a
        .models
        .iter()
        .map(|p| Checkpoint::load(p).map(Checkpoint::into_model))
        .collect::<Result<Vec<_>>>()?;
    for (m, p) in models.iter().zip(&a.models) {
        if m.config.vocab_size != vocab.len() {
            return Err(Error::Vocabulary(format!(
                "{} expects {} tokens but {} has {}",
                p.display(),
                m.config.vocab_size,
                a.vocab.display(),
                vocab.len()
            )));
        }
    }
    let (src, mt) = (read_lines(&a.src)?, read_lines(&a.mt)?);
    if src.len() != mt.len() {
        return Err(Error::Alignment {
            left: a.src.display().to_string(),
            left_lines: src.len(),
            right: a.mt.display().to_string(),
            right_lines: mt.len(),
        });
    }
    if let Some(i) = src.iter().zip(&mt).position(|(s, m)| s.trim().is_empty() || m.trim().is_empty()) {
        return Err(Error::Input(format!("line {}: source and MT must both be non-empty", i + 1)));
    }
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = src
        .iter()
        .zip(&mt)
        .map(|(s, m)| (vocab.encode(&tokenize(s)), vocab.encode(&tokenize(m))))
        .collect();
    log::info!("decoding {} sentences with {} model(s), beam {}", pairs.len(), models.len(), a.beam);
    let hyps = par::with_threads(a.threads, || decode_corpus(&models, &pairs, cfg))?;
    let lines = hyps.iter().map(|h| {
        let toks = vocab.decode(h.content());
        if a.join_bpe {
            join_subwords(&toks, DEFAULT_MARKER)
        } else {
            toks.join(" ")
        }
    });
    write_lines(&a.out, lines)?;
    rec.output(&a.out);
    rec.finish(&beside(&a.out))
}

pub fn score(a: &Score) -> Result<()> {
    let metric: Metric = a.metric.parse()?;
    print!("{}", score_files(&a.hyp, &a.reference, metric)?);
    Ok(())
}

pub fn compare_data(a: &CompareData) -> Result<()> {
    print!("{}", compare_corpora(&a.mt, &a.pe)?);
    Ok(())
}

pub fn synth(a: &Synth) -> Result<()> {
    let toy = ToyConfig { words: a.words, error_rate: a.error_rate, ..ToyConfig::default() };
    let settings = format!(
        "words={}\nerror_rate={}\ntrain={}\ndev={}\ntest={}\n",
        a.words, a.error_rate, a.train, a.dev, a.test
    );
    let mut rec = Recorder::start("synth", &settings);
    rec.seed(a.seed);
    let task = ToyTask::new(toy, a.seed)?;
    create_dir(&a.out_dir)?;
    for (i, (name, n)) in [("train", a.train), ("dev", a.dev), ("test", a.test)].into_iter().enumerate() {
        let data = task.sample(n, a.seed.wrapping_add(i as u64 + 1));
        for p in write_prefix(&a.out_dir.join(name), &data)? {
            rec.output(p);
        }
    }
    rec.finish(&a.out_dir.join("manifest.json"))
}
