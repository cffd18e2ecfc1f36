// Scratch probe for desk-scale dynamics (not part of the book examples).
use minimt::corpus::synth::{generate_synthetic, SyntheticLanguageSpec};
use minimt::corpus::{extract_monolingual, mix_multilingual, BatchMode};
use minimt::decode::BeamParams;
use minimt::lang::LangId;
use minimt::metrics::{build_lexicons, Smoothing};
use minimt::model::{Model, ModelConfig};
use minimt::selftrain::{zero_shot_eval, SelfTrainPlan, SelfTrainer};
use minimt::subword::SubwordModel;
use minimt::train::{train, OptimizerKind, TrainOptions, TrainState};
use std::collections::HashSet;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let spec = SyntheticLanguageSpec::default_triangle();
    let (p, b, c) = (LangId::new("p"), LangId::new("b"), LangId::new("c"));
    let n = 2000;

    let authentic =
        generate_synthetic(&spec, &[(p.clone(), b.clone()), (p.clone(), c.clone())], n, true, 42)
            .unwrap();
    // dev sets disjoint from training bases
    let train_bases: HashSet<String> = authentic
        .iter()
        .filter(|cc| cc.src_lang == p)
        .flat_map(|cc| cc.sources().map(|s| s.to_owned()))
        .collect();
    let mut dev_rng = minimt::rng::Rng::seed_from(777);
    let dev_bases = spec.sample_bases(200, &mut dev_rng, &train_bases).unwrap();
    let dev_bc = spec
        .corpus_from_bases(&dev_bases, &b, &c, minimt::corpus::Origin::Authentic)
        .unwrap();
    let dev_cb = dev_bc.reversed();
    let dev_pb = spec
        .corpus_from_bases(&dev_bases, &p, &b, minimt::corpus::Origin::Authentic)
        .unwrap();

    let all_text: Vec<String> = authentic
        .iter()
        .flat_map(|cc| cc.pairs.iter().flat_map(|(s, t)| [s.clone(), t.clone()]))
        .collect();
    let subword = SubwordModel::learn(
        all_text.iter().map(String::as_str),
        300,
        &[p.clone(), b.clone(), c.clone()],
    )
    .unwrap();
    println!("[{:.1}s] vocab={} corpora ready", t0.elapsed().as_secs_f64(), subword.vocab_size());

    let ts = mix_multilingual(&authentic, &subword, 1).unwrap();
    println!("training set: {} examples, dropped {}", ts.len(), ts.dropped_too_long);

    let cfg = ModelConfig::desk_transformer(subword.vocab_size());
    let mut model = Model::<f32>::build(cfg, 7).unwrap();
    let opts = TrainOptions {
        epochs: None,
        max_epochs: 12,
        patience: 2,
        batch: BatchMode::Tokens(1024),
        optimizer: OptimizerKind::scheduled_adam(400, 64, 2.0),
        ..TrainOptions::for_arch(minimt::model::Arch::Transformer, 64, 1)
    };
    let mut state = TrainState::new(opts.optimizer, 1);

    let epoch_start = Instant::now();
    let one = TrainOptions { epochs: Some(1), ..opts.clone() };
    train(&mut model, &mut state, &ts, None, &one).unwrap();
    println!(
        "[{:.1}s] 1 epoch took {:.1}s",
        t0.elapsed().as_secs_f64(),
        epoch_start.elapsed().as_secs_f64()
    );

    let more = TrainOptions { epochs: Some(7), ..opts.clone() };
    let summary = train(&mut model, &mut state, &ts, None, &more).unwrap();
    println!(
        "[{:.1}s] total 8 epochs, train loss {:.4}",
        t0.elapsed().as_secs_f64(),
        summary.final_train_loss
    );

    let lexicons = build_lexicons(&authentic);
    let beam = BeamParams { beam_size: 4, length_penalty: 0.6 };

    // supervised direction quality
    let eval_start = Instant::now();
    let (bleu_pb, bleu_bp, _) = zero_shot_eval(
        &model, &subword, &dev_pb, &dev_pb.reversed(), &lexicons, &beam, Smoothing::AddK(1.0),
    )
    .unwrap();
    println!(
        "[{:.1}s] supervised P->B {:.2}  B->P {:.2} (eval {:.1}s)",
        t0.elapsed().as_secs_f64(),
        bleu_pb.bleu,
        bleu_bp.bleu,
        eval_start.elapsed().as_secs_f64()
    );

    // baseline zero-shot
    let (zs_bc, zs_cb, (pur_bc, pur_cb)) = zero_shot_eval(
        &model, &subword, &dev_bc, &dev_cb, &lexicons, &beam, Smoothing::AddK(1.0),
    )
    .unwrap();
    println!(
        "[{:.1}s] baseline zero-shot B->C {:.2} (purity {:?})  C->B {:.2} (purity {:?})",
        t0.elapsed().as_secs_f64(),
        zs_bc.bleu,
        pur_bc,
        zs_cb.bleu,
        pur_cb
    );

    // pivot through p
    let srcs: Vec<String> = dev_bc.sources().map(str::to_owned).collect();
    let refs: Vec<String> = dev_bc.targets().map(str::to_owned).collect();
    let piv = minimt::decode::pivot_translate(&model, &srcs, &b, &p, &c, &subword, &beam).unwrap();
    let bleu_piv = minimt::metrics::bleu(&piv, &refs, Smoothing::AddK(1.0)).unwrap();
    println!("[{:.1}s] pivot B->P->C {:.2}", t0.elapsed().as_secs_f64(), bleu_piv.bleu);

    // self-training rounds
    let plan = SelfTrainPlan {
        epochs_per_round: 3,
        beam,
        ..SelfTrainPlan::new(b.clone(), c.clone(), 3, 99)
    };
    let trainer = SelfTrainer {
        authentic: &authentic,
        subword: &subword,
        plan,
        dev_l1_to_l2: &dev_bc,
        dev_l2_to_l1: &dev_cb,
        round_opts: opts.clone(),
        smoothing: Smoothing::AddK(1.0),
        out_dir: None,
    };
    let round_start = Instant::now();
    let (_m2, reports) = trainer.run(model, state).unwrap();
    for r in &reports {
        println!(
            "round {}: B->C {:.2} C->B {:.2} purity {:?}/{:?} [{:.1}s]",
            r.round, r.bleu_l1_to_l2, r.bleu_l2_to_l1, r.purity_l1_to_l2, r.purity_l2_to_l1,
            r.wall_clock.as_secs_f64()
        );
    }
    println!(
        "[{:.1}s] rounds took {:.1}s total",
        t0.elapsed().as_secs_f64(),
        round_start.elapsed().as_secs_f64()
    );
}
