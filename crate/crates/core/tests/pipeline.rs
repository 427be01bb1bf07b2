use std::fs;
use std::path::Path;

use ndarray::array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use medvqa::data::{load_image_caption, load_vqa_triples, CaptionData};
use medvqa::model::ModelConfig;
use medvqa::optim::{Adam, AdamConfig};
use medvqa::params::{Builder, ParamKind, ParamSet};
use medvqa::pretrain::build_itm_batch;
use medvqa::synthetic::{generate_synthetic, write_synthetic, Scene, SyntheticSpec};
use medvqa::train::{pretrain_loop, NoHooks, TrainConfig};

const NUMBER_WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

/// Answer a synthetic question by reading its text and scanning the scene record.
fn scene_oracle(scene: &Scene, question: &str, rows: &[&str], cols: &[&str]) -> String {
    let w: Vec<&str> = question.split(' ').collect();
    let at = |r: &str, c: &str| {
        let row = rows.iter().position(|x| *x == r).unwrap();
        let col = cols.iter().position(|x| *x == c).unwrap();
        (row, col)
    };
    let by_shape = |s: &str| scene.objects.iter().find(|o| o.shape.word() == s);
    match w.as_slice() {
        ["what", "color", "is", "the", s] => by_shape(s).unwrap().color.word().to_string(),
        ["what", "shape", "is", "at", "the", r, c] => {
            let cell = at(r, c);
            scene.objects.iter().find(|o| (o.row, o.col) == cell).unwrap().shape.word().to_string()
        }
        ["where", "is", "the", s] => {
            let o = by_shape(s).unwrap();
            format!("{} {}", rows[o.row], cols[o.col])
        }
        ["is", "there", "a", s] => if by_shape(s).is_some() { "yes" } else { "no" }.to_string(),
        ["how", "many", "shapes", "are", "there"] => NUMBER_WORDS[scene.objects.len()].to_string(),
        _ => panic!("unexpected question `{question}`"),
    }
}

#[test]
fn synthetic_answers_follow_scene_records() {
    for (grid, rows, cols) in [(2, vec!["top", "bottom"], vec!["left", "right"]), (3, vec!["top", "middle", "bottom"], vec!["left", "center", "right"])] {
        let spec = SyntheticSpec { grid, max_objects: 3, caption_pairs: 0, vqa_train_images: 30, vqa_test_images: 0, seed: 9, ..Default::default() };
        let corpus = generate_synthetic(&spec).unwrap();
        let sample: Vec<_> = corpus.train.iter().take(100).collect();
        assert_eq!(sample.len(), 100);
        for qa in sample {
            assert_eq!(qa.answer, scene_oracle(&corpus.vqa_scenes[qa.scene], &qa.text, &rows, &cols), "{}", qa.question_id);
        }
    }
}

#[test]
fn written_corpus_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { caption_pairs: 12, vqa_train_images: 5, vqa_test_images: 3, ..Default::default() };
    let corpus = generate_synthetic(&spec).unwrap();
    let paths = write_synthetic(&corpus, dir.path()).unwrap();
    let caps = load_image_caption(&paths.captions).unwrap();
    assert_eq!(caps.len(), 12);
    assert_eq!(caps[3].caption, corpus.captions[3]);
    let train = load_vqa_triples(&paths.vqa_train).unwrap();
    let test = load_vqa_triples(&paths.vqa_test).unwrap();
    assert_eq!(train.len(), corpus.train.len());
    assert_eq!(test.len(), corpus.test.len());
    assert!(train.iter().chain(&test).all(|t| t.image.is_file()));
    assert_eq!(fs::read_to_string(&paths.scenes).unwrap().lines().count(), 12 + 8);
}

#[test]
fn adam_matches_hand_iteration_on_quadratic() {
    // loss ½x², gradient x, from x = 1
    let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.01);
    let mut ps = ParamSet::<f64>::new();
    ps.insert("x", ParamKind::Weight, array![[1.0]]).unwrap();
    let mut opt = Adam::new(AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, eps, weight_decay: wd }, &ps);
    let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
    for t in 1..=3 {
        let g = x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        let next = x - lr * (mhat / (vhat.sqrt() + eps) + wd * x);
        assert!(next < x);
        let grad = ps.get("x").unwrap().clone();
        opt.update(&mut ps, &[Some(grad)]).unwrap();
        assert!((ps.get("x").unwrap()[[0, 0]] - next).abs() < 1e-12, "step {t}");
        x = next;
    }
}

/// Φ(z) by Simpson's rule on the standard normal density.
fn normal_cdf(z: f64) -> f64 {
    let n = 20_000;
    let h = z / n as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let s: f64 = (0..=n).map(|i| {
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        w * pdf(i as f64 * h)
    }).sum();
    0.5 + s * h / 3.0
}

#[test]
fn weight_init_moments() {
    let mut ps = ParamSet::<f64>::new();
    Builder::init(&mut ps, ChaCha8Rng::seed_from_u64(4)).weight("w", 128, 512).unwrap();
    let w = ps.get("w").unwrap();
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let std = (w.mapv(|x| (x - mean).powi(2)).sum() / n).sqrt();
    assert!((std - 0.02).abs() <= 0.003, "std {std}");
    // a normal(0, 0.02) truncated at two standard deviations
    let z: f64 = 2.0;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = 2.0 * normal_cdf(z) - 1.0;
    let expected = 0.02 * (1.0 - 2.0 * z * pdf / mass).sqrt();
    assert!((std - expected).abs() < 3e-4, "std {std} vs {expected}");
    assert!(w.iter().all(|x| x.abs() <= 0.04));
    assert!(mean.abs() < 3.0 * expected / n.sqrt());
}

#[test]
fn itm_negative_share() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = build_itm_batch(10_000, 0.5, &mut rng).unwrap();
    let negatives = batch.labels.iter().filter(|&&l| l == 0).count();
    let sigma = (10_000.0f64 * 0.25).sqrt();
    assert!((negatives as f64 - 5000.0).abs() <= 3.0 * sigma, "{negatives}");
    for i in 0..10_000 {
        assert_eq!(batch.labels[i] == 1, batch.image[i] == i && batch.text[i] == i);
    }
}

#[test]
fn pretraining_loss_trends_down() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { caption_pairs: 256, vqa_train_images: 0, vqa_test_images: 0, seed: 2, ..Default::default() };
    let corpus = generate_synthetic(&spec).unwrap();
    write_synthetic(&corpus, dir.path()).unwrap();
    let vocab = corpus.vocabulary().unwrap();
    let cfg = ModelConfig::desk(vocab.len());
    let data = CaptionData::prepare(&corpus.caption_pairs(dir.path()), &vocab, &cfg).unwrap();
    let train = TrainConfig { steps: 200, batch_size: 16, seed: 2, ..TrainConfig::pretrain() };
    let out = pretrain_loop(&cfg, &vocab, &data, &train, None, "", &mut NoHooks).unwrap();
    let totals: Vec<f64> = out.losses.iter().map(|l| l.total()).collect();
    assert_eq!(totals.len(), 200);
    let first = totals[..50].iter().sum::<f64>() / 50.0;
    let last = totals[150..].iter().sum::<f64>() / 50.0;
    assert!(last < first, "first-50 mean {first}, last-50 mean {last}");
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["medvqa"];
    argv.extend_from_slice(args);
    medvqa::cli::run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cli_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    assert_eq!(cli(&["make-synthetic", "--out", s(&data), "--synthetic.caption_pairs", "0", "--synthetic.vqa_train_images", "6", "--synthetic.vqa_test_images", "3"]), 0);
    let train = data.join("vqa_train.tsv");
    let test = data.join("vqa_test.tsv");
    let run = root.path().join("ft");
    let config = root.path().join("cfg.json");
    fs::write(&config, r#"{"train": {"steps": 4, "batch_size": 4}}"#).unwrap();
    assert_eq!(
        cli(&["finetune", "--out", s(&run), "--no-pretrain", "--config", s(&config), "--data.vqa_train", s(&train), "--data.vqa_test", s(&test), "--data.vocab", s(&data.join("vocab.txt"))]),
        0
    );
    for f in ["config.json", "train_log.tsv", "report.txt", "checkpoint/manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["steps"], 4);
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert!(log.starts_with("step\tloss_vqa\n1\t"));

    let ckpt = run.join("checkpoint");
    let preds = root.path().join("out/preds.tsv");
    assert_eq!(cli(&["generate", "--checkpoint", s(&ckpt), "--data", s(&test), "--out", s(&preds), "--threads", "2"]), 0);
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 3 * 4);
    let report = root.path().join("out/report.txt");
    assert_eq!(cli(&["evaluate", "--predictions", s(&preds), "--data", s(&test), "--out", s(&report)]), 0);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("n_examples\t12\nvqa_accuracy\t"));
    // scoring the same predictions from the checkpoint gives the same summary
    let again = root.path().join("out/report2.txt");
    assert_eq!(cli(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&test), "--out", s(&again)]), 0);
    let head = |t: &str| t.lines().take(3).collect::<Vec<_>>().join("\n");
    assert_eq!(head(&text), head(&fs::read_to_string(&again).unwrap()));

    assert_eq!(cli(&["finetune", "--out", s(&root.path().join("x")), "--train.no_such_key", "1", "--no-pretrain"]), 2);
    assert_eq!(cli(&["finetune", "--out", s(&root.path().join("y"))]), 2);
    assert_eq!(cli(&["generate", "--checkpoint", s(&root.path().join("missing")), "--data", s(&test), "--out", s(&preds)]), 1);
}
