//! Scratch calibration runs (temporary).

use fedconv::compress::{
    compress_model, derive_plan, finetune_compression, ConvParams, FinetuneOptions, KernelPolicy,
};
use fedconv::data::gen_digits;
use fedconv::federation::split_dataset;
use fedconv::model::{evaluate, local_train, LayerDesc, ModelSpec, ParameterSet, TrainOptions};
use std::time::Instant;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "global".into());
    match mode.as_str() {
        "global" => global_study(),
        "fidelity" => fidelity_study(),
        _ => eprintln!("unknown mode"),
    }
}

fn spec28(c1: usize, c2: usize, k: usize) -> ModelSpec {
    ModelSpec::build(
        &[1, 28, 28],
        &[
            LayerDesc::conv("conv1", c1, (k, k)),
            LayerDesc::conv("conv2", c2, (k, k)),
            LayerDesc::dense("fc", 10),
        ],
        10,
    )
    .unwrap()
}

fn global_study() {
    let t0 = Instant::now();
    let data = gen_digits(10_000, 28, 42).unwrap();
    println!("data gen: {:.1}s", t0.elapsed().as_secs_f64());
    let splits = split_dataset(&data, 42).unwrap();
    println!(
        "splits: {} {} {} {}",
        splits.server_train.len(),
        splits.server_test.len(),
        splits.client_train.len(),
        splits.client_test.len()
    );
    for (c1, c2, k, epochs, lr) in [(6usize, 12usize, 5usize, 8usize, 0.05), (6, 12, 5, 10, 0.05), (6, 12, 5, 8, 0.08)] {
        let spec = spec28(c1, c2, k);
        let t = Instant::now();
        let params = local_train(
            &spec,
            &ParameterSet::init(&spec, 1),
            &splits.client_train,
            &TrainOptions {
                epochs,
                lr,
                batch_size: 32,
                seed: 7,
            },
        )
        .unwrap();
        let train_time = t.elapsed().as_secs_f64();
        let acc = evaluate(&spec, &params, &splits.server_test).unwrap().accuracy;
        println!(
            "c1={c1} c2={c2} k={k} epochs={epochs} lr={lr}: test acc {:.4} ({train_time:.1}s, {} params)",
            acc,
            spec.param_count()
        );
    }
}

fn fidelity_study() {
    let data = gen_digits(10_000, 28, 42).unwrap();
    let splits = split_dataset(&data, 42).unwrap();
    let spec = spec28(6, 12, 5);
    let t = Instant::now();
    let global = local_train(
        &spec,
        &ParameterSet::init(&spec, 1),
        &splits.client_train,
        &TrainOptions {
            epochs: 8,
            lr: 0.08,
            batch_size: 32,
            seed: 7,
        },
    )
    .unwrap();
    let gacc = evaluate(&spec, &global, &splits.server_test).unwrap().accuracy;
    println!("global acc {:.4} ({:.1}s)", gacc, t.elapsed().as_secs_f64());

    let plan = derive_plan(&spec, 0.5, KernelPolicy::Auto).unwrap();
    let cp = ConvParams::init(&plan, 5);
    let opts = FinetuneOptions::defaults(9);
    let sub0 = compress_model(&global, &plan, &cp, opts.s_p, opts.s_n).unwrap();
    let acc0 = evaluate(&plan.sub_spec, &sub0, &splits.server_test).unwrap().accuracy;
    let t = Instant::now();
    let cp = finetune_compression(&global, &plan, &cp, &splits.server_train, &opts).unwrap();
    let ft_time = t.elapsed().as_secs_f64();
    let sub = compress_model(&global, &plan, &cp, opts.s_p, opts.s_n).unwrap();
    let acc = evaluate(&plan.sub_spec, &sub, &splits.server_test).unwrap().accuracy;
    println!(
        "sub acc before {:.4} -> after {:.4} (finetune {:.1}s); gap {:.2} pts",
        acc0,
        acc,
        ft_time,
        (gacc - acc) * 100.0
    );
}
