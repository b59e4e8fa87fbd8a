//! One function per subcommand. Each builds the [`Experiment`], computes its
//! results and hands every file to the [`Run`] writer.

use std::path::PathBuf;

use embspace::autodiff::jacobian;
use embspace::classifier::{confusion_matrix, probability_grid_csv, Classifier};
use embspace::encoder::{vision_encode, vision_encode_batch, Embedding, ImageTensor};
use embspace::harness::io::{encode_archive, encode_tensor, params_to_archive, Tensor};
use embspace::harness::{fresh_params, generate_dataset, pca_project, quality, Experiment};
use embspace::linear_lens::{prediction_csv, predicted_vs_empirical, spectrum_report};
use embspace::matcher::{match_embedding, systematic_eval};
use embspace::noise_detect::{
    detect_modified, detection_sweep, diagonal_fraction, flip_threshold, noisy_confusion,
    DetectionConfig, NoiseExperimentConfig,
};
use serde_json::json;

use crate::run::Run;
use crate::CliError;

type Out = Result<PathBuf, CliError>;

pub fn dispatch(name: &str, run: Run) -> Out {
    match name {
        "gen-data" => gen_data(run),
        "init-model" => init_model(run),
        "train" => train(run),
        "zero-shot" => zero_shot(run),
        "match" => match_one(run),
        "systematic" => systematic(run),
        "jacobian" => jacobian_cmd(run),
        "predict-noise" => predict_noise(run),
        "noisy-confusion" => noisy(run),
        "detect" => detect(run),
        "sweep-detect" => sweep_detect(run),
        "project" => project(run),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out)?;
    Ok(out)
}

fn json_text(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json values serialize") + "\n"
}

fn experiment(run: &mut Run) -> Result<Experiment, CliError> {
    let model = run.model()?;
    Ok(Experiment::new(&run.config, model)?)
}

/// The image a single-image command studies, its noise id and its class:
/// the `input` file if given (class = zero-shot prediction), else dataset
/// image `source`.
fn subject(run: &mut Run, exp: &Experiment) -> Result<(ImageTensor, usize, usize), CliError> {
    let id = run.config.source;
    match run.input()? {
        Some(img) => {
            let class = exp.classifier().predict(&img)?;
            Ok((img, id, class))
        }
        None => Ok((exp.image(id)?.clone(), id, exp.dataset.labels[id])),
    }
}

fn check_target(exp: &Experiment, class: usize) -> Result<(), CliError> {
    if class >= exp.n_classes() {
        return Err(CliError::Usage(format!(
            "target_class {class} out of range for {} classes",
            exp.n_classes()
        )));
    }
    Ok(())
}

fn gen_data(mut run: Run) -> Out {
    let ds = generate_dataset(&run.config.dataset_spec())?;
    let (h, w, c) = ds.images[0].shape();
    let data: Vec<f64> = ds.images.iter().flat_map(|i| i.pixels().iter().copied()).collect();
    let t = Tensor::new(vec![ds.len(), h, w, c], data)?;
    run.write("images.ept", tensor_bytes(&t)?)?;
    let mut csv = String::from("id,class,name,split\n");
    for (i, &l) in ds.labels.iter().enumerate() {
        let split = if ds.train.contains(&i) { "train" } else { "test" };
        csv.push_str(&format!("{i},{l},{},{split}\n", ds.class_names[l]));
    }
    run.write("labels.csv", csv)?;
    run.finish()
}

fn init_model(mut run: Run) -> Out {
    let ds = generate_dataset(&run.config.dataset_spec())?;
    let p = fresh_params(&run.config, &ds)?;
    run.write("model.epa", encode_archive(&params_to_archive(&p))?)?;
    run.finish()
}

fn train(mut run: Run) -> Out {
    let mut exp = experiment(&mut run)?;
    let report = exp.train()?;
    run.write("model.epa", encode_archive(&params_to_archive(&exp.params))?)?;
    let mut csv = String::from("epoch,loss\n");
    csv.push_str(&format!("0,{}\n", report.initial_loss));
    for (e, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", e + 1));
    }
    run.write("train.csv", csv)?;
    run.write("train.json", serde_json::to_string_pretty(&report).expect("serializes") + "\n")?;
    run.finish()
}

fn zero_shot(mut run: Run) -> Out {
    let exp = experiment(&mut run)?;
    let zs = exp.classifier();
    let (images, truth) = exp.dataset.select(&exp.dataset.test);
    let cm = confusion_matrix(&zs, exp.labels.names(), &images, &truth)?;
    let probs = images.iter().map(|i| zs.probs(i)).collect::<Result<Vec<_>, _>>()?;
    run.write("confusion.csv", cm.to_csv())?;
    run.write("confusion.json", cm.to_json())?;
    run.write("probs.csv", probability_grid_csv(&exp.dataset.test, &probs, &exp.labels.names()))?;
    println!("zero-shot accuracy {:.4}", cm.accuracy());
    run.finish()
}

fn match_one(mut run: Run) -> Out {
    let exp = experiment(&mut run)?;
    let (x0, id, class) = subject(&mut run, &exp)?;
    let t = run.config.target_class;
    check_target(&exp, t)?;
    let targets = exp.targets()?;
    let r = match_embedding(&exp.params, &x0, &targets[t], &exp.match_config())?;
    let probs = exp.classifier().probs(&r.x_matched)?;
    let q = quality(&x0, &r.x_matched)?;
    run.write("trace.csv", r.trace.to_csv())?;
    run.write("matched.ept", tensor_bytes(&Tensor::from_image(&r.x_matched))?)?;
    let summary = json!({
        "source": id,
        "source_class": class,
        "target_class": t,
        "converged": r.converged(),
        "steps": r.steps,
        "final_cosine": r.final_cosine,
        "final_loss": r.final_loss,
        "predicted": embspace::classifier::argmax(&probs),
        "probs": probs,
        "quality": q,
    });
    run.write("match.json", json_text(&summary))?;
    println!(
        "steps {} cosine {:.4} psnr {:.2} dB",
        r.steps, r.final_cosine, q.psnr_db
    );
    run.finish()
}

fn systematic(mut run: Run) -> Out {
    let exp = experiment(&mut run)?;
    let ids = exp.held_out_round_robin(run.config.n_images);
    let (images, truth) = exp.dataset.select(&ids);
    let mut report = systematic_eval(
        &exp.params,
        &exp.labels,
        &images,
        &truth,
        &exp.targets()?,
        &exp.match_config(),
    )?;
    for r in &mut report.matches {
        r.image = ids[r.image];
    }
    run.write("report.json", report.to_json() + "\n")?;
    run.write("matches.csv", report.matches_csv())?;
    run.write("original_confusion.csv", report.originals.to_csv())?;
    let s = &report.summary;
    println!(
        "converged {:.3} systematic accuracy {:.3} target rate {:.3}",
        s.converged_fraction, s.systematic_accuracy, s.target_rate
    );
    run.finish()
}

fn jacobian_cmd(mut run: Run) -> Out {
    let exp = experiment(&mut run)?;
    let (x, id, class) = subject(&mut run, &exp)?;
    let jr = jacobian(&exp.params, &x)?;
    let spec = spectrum_report(&jr.j, run.config.tau)?;
    run.write("spectrum.csv", spec.to_csv())?;
    run.write("jacobian.ept", tensor_bytes(&Tensor::from_matrix(&jr.j))?)?;
    let summary = json!({
        "source": id,
        "source_class": class,
        "rows": jr.j.rows(),
        "cols": jr.j.cols(),
        "spectrum": spec,
    });
    run.write("jacobian.json", json_text(&summary))?;
    println!("effective rank {} (tau {})", spec.effective_rank, spec.tau);
    run.finish()
}

fn predict_noise(mut run: Run) -> Out {
    let exp = experiment(&mut run)?;
    let (x, _, class) = subject(&mut run, &exp)?;
    let t = run.config.target_class;
    check_target(&exp, t)?;
    if t == class {
        return Err(CliError::Usage(format!(
            "target_class {t} equals the image's class"
        )));
    }
    let rows = predicted_vs_empirical(
        &exp.params,
        &x,
        &exp.labels.text_embs[class],
        &exp.labels.text_embs[t],
        &run.config.sigma_grid,
        run.config.n_samples,
        run.config.seed,
    )?;
    run.write("prediction.csv", prediction_csv(&rows))?;
    run.finish()
}

fn noisy(mut run: Run) -> Out {
    let exp = experiment(&mut run)?;
    let ids = exp.held_out_round_robin(exp.n_classes());
    let (images, truth) = exp.dataset.select(&ids);
    if truth.iter().enumerate().any(|(i, &c)| i != c) {
        return Err(CliError::Usage("every class needs a held-out image".into()));
    }
    let cfg = NoiseExperimentConfig {
        sigma: run.config.sigma,
        n_samples: run.config.n_samples,
        seed: run.config.seed,
    };
    let cm = noisy_confusion(&exp.classifier(), exp.labels.names(), &images, &cfg)?;
    let frac = diagonal_fraction(&cm);
    run.write("noisy_confusion.csv", cm.to_csv())?;
    let summary = json!({
        "sigma": cfg.sigma,
        "n_samples": cfg.n_samples,
        "images": ids,
        "diagonal_fraction": frac,
        "confusion": cm,
    });
    run.write("noisy_confusion.json", json_text(&summary))?;
    println!("diagonal fraction {frac:.4}");
    run.finish()
}

fn detect(mut run: Run) -> Out {
    let exp = experiment(&mut run)?;
    let (x, id, _) = subject(&mut run, &exp)?;
    let cfg = DetectionConfig {
        sigma: run.config.sigma,
        votes: run.config.votes,
        seed: run.config.seed,
    };
    let flag = detect_modified(&exp.classifier(), &x, id as u64, &cfg)?;
    let flag = format!("{flag:?}").to_lowercase();
    run.write(
        "detect.csv",
        format!("image,sigma,votes,flag\n{id},{},{},{flag}\n", cfg.sigma, cfg.votes),
    )?;
    println!("{flag}");
    run.finish()
}

fn sweep_detect(mut run: Run) -> Out {
    let exp = experiment(&mut run)?;
    let c = &run.config;
    let ids = exp.correct_round_robin(c.n_detect)?;
    let originals: Vec<ImageTensor> = ids.iter().map(|&i| exp.dataset.images[i].clone()).collect();
    let matched: Vec<ImageTensor> = exp
        .match_paired(&ids)?
        .into_iter()
        .map(|r| r.x_matched)
        .collect();
    let zs = exp.classifier();
    let report = detection_sweep(&zs, &originals, &matched, &c.sigma_grid, c.votes, c.seed)?;
    let n = ids.len();
    let mut flips = String::from("id,image,kind,flip_sigma\n");
    for (k, img) in originals.iter().chain(&matched).enumerate() {
        let s = flip_threshold(&zs, img, k as u64, &c.sigma_grid, c.votes, c.seed)?;
        let kind = if k < n { "original" } else { "matched" };
        flips.push_str(&format!("{k},{},{kind},{s}\n", ids[k % n]));
    }
    run.write("sweep.csv", report.to_csv())?;
    run.write("table.txt", report.to_table())?;
    run.write("flips.csv", flips)?;
    if let Some(b) = report.best() {
        println!("best accuracy {:.3} at sigma {}", b.accuracy, b.sigma);
    }
    run.finish()
}

fn project(mut run: Run) -> Out {
    let exp = experiment(&mut run)?;
    let (x, _, class) = subject(&mut run, &exp)?;
    let t = run.config.target_class;
    check_target(&exp, t)?;
    let targets = exp.targets()?;
    let r = match_embedding(&exp.params, &x, &targets[t], &exp.match_config())?;
    let (train, labels) = exp.dataset.select(&exp.dataset.train);
    let train_embs = vision_encode_batch(&exp.params, &train)?;
    let mut embs = Vec::new();
    let mut tags = Vec::new();
    for (c, name) in exp.dataset.class_names.iter().enumerate() {
        let members: Vec<Embedding> = train_embs
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == c)
            .map(|(e, _)| e.clone())
            .collect();
        embs.push(Embedding::mean(&members)?);
        tags.push(format!("mean:{name}"));
    }
    let names = &exp.dataset.class_names;
    embs.push(vision_encode(&exp.params, &x)?);
    tags.push(format!("original:{}", names[class]));
    embs.push(r.embedding.clone());
    tags.push(format!("matched:{}", names[t]));
    embs.push(targets[t].clone());
    tags.push(format!("target:{}", names[t]));
    let proj = pca_project(&embs, None)?;
    run.write("projection.csv", proj.to_csv(&tags))?;
    run.finish()
}
