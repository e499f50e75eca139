use dhkd::harness::{self, distill, init_student, load_data, train_teacher, DataSplit, RunConfig, Setting};
use dhkd::model::encode_model;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "classes = 3
         dim = 6
         train_per_class = 40
         test_per_class = 20
         teacher_widths = 16,16
         student_widths = 12,8
         aux_hidden = 10
         epochs = 8
         teacher_epochs = 6
         milestones = 4,6
         batch_size = 16
         lr = 0.05",
    )
    .unwrap();
    cfg
}

fn setup(cfg: &RunConfig) -> (DataSplit, dhkd::model::DualHeadNet) {
    let data = load_data(cfg).unwrap();
    let teacher = train_teacher(cfg, &data).unwrap().model;
    (data, teacher)
}

fn with(cfg: &RunConfig, pairs: &[(&str, &str)]) -> RunConfig {
    let mut c = cfg.clone();
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let cfg = small_config();
    for setting in Setting::ALL {
        let c = with(&cfg, &[("setting", setting.name())]);
        let (data, teacher) = setup(&c);
        let (data2, teacher2) = setup(&c);
        assert_eq!(encode_model(&teacher), encode_model(&teacher2));
        let a = distill(&c, &teacher, &data).unwrap();
        let b = distill(&c, &teacher2, &data2).unwrap();
        assert_eq!(a.to_csv(false), b.to_csv(false), "{setting}");
        assert_eq!(encode_model(&a.model), encode_model(&b.model), "{setting}");
    }
}

#[test]
fn csv_has_fixed_header_and_one_row_per_epoch() {
    let cfg = with(&small_config(), &[("setting", "dhkd")]);
    let (data, teacher) = setup(&cfg);
    let run = distill(&cfg, &teacher, &data).unwrap();
    let csv = run.to_csv(false);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], harness::CSV_HEADER);
    assert_eq!(lines.len(), cfg.epochs + 1);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 17);
        assert_eq!(cols[0], (i + 1).to_string());
        assert_eq!(cols[1], "dhkd");
        assert_eq!(cols[16], "0");
    }
}

#[test]
fn distillation_leaves_teacher_untouched() {
    let cfg = with(&small_config(), &[("setting", "dhkd")]);
    let (data, teacher) = setup(&cfg);
    let before = encode_model(&teacher);
    let _ = distill(&cfg, &teacher, &data).unwrap();
    assert_eq!(encode_model(&teacher), before);
}

#[test]
fn zero_weight_aux_head_leaves_main_path_bitwise_equal_to_ce_only() {
    let cfg = small_config();
    let (data, teacher) = setup(&cfg);
    let ce = distill(&with(&cfg, &[("setting", "ce_only")]), &teacher, &data).unwrap();
    for setting in ["dhkd", "dhkd_vanilla"] {
        let dual = distill(&with(&cfg, &[("setting", setting), ("alpha", "0"), ("alignment", "off")]), &teacher, &data).unwrap();
        assert_eq!(dual.model.backbone(), ce.model.backbone(), "{setting}");
        assert_eq!(dual.model.main_head(), ce.model.main_head(), "{setting}");
        for (a, b) in dual.logs.iter().zip(&ce.logs) {
            assert_eq!(a.acc_main.to_bits(), b.acc_main.to_bits());
            assert_eq!(a.loss_ce.to_bits(), b.loss_ce.to_bits());
        }
    }
}

#[test]
fn zero_weight_binary_kl_reduces_to_ce_only() {
    let cfg = small_config();
    let (data, teacher) = setup(&cfg);
    let ce = distill(&with(&cfg, &[("setting", "ce_only")]), &teacher, &data).unwrap();
    let mixed = distill(&with(&cfg, &[("setting", "ce_plus_bkl"), ("alpha", "0")]), &teacher, &data).unwrap();
    assert_eq!(encode_model(&mixed.model), encode_model(&ce.model));
}

#[test]
fn conflict_rate_matches_recount_and_projection_holds() {
    let cfg = with(&small_config(), &[("setting", "dhkd"), ("lr", "0.2")]);
    let (data, teacher) = setup(&cfg);
    let run = distill(&cfg, &teacher, &data).unwrap();
    let mut saw_conflict = false;
    for (log, trace) in run.logs.iter().zip(&run.traces) {
        let recount = trace.dots.iter().filter(|&&d| d < 0.0).count();
        assert!(!trace.dots.is_empty());
        assert_eq!(log.conflict_rate, recount as f64 / trace.dots.len() as f64);
        assert!((0.0..=1.0).contains(&log.conflict_rate));
        assert!(trace.min_aligned_dot >= -1e-12);
        saw_conflict |= recount > 0;
    }
    assert!(saw_conflict, "no conflicting step to exercise the projection");
}

#[test]
fn single_head_settings_log_no_conflict_rate() {
    let cfg = with(&small_config(), &[("setting", "ce_plus_bkl")]);
    let (data, teacher) = setup(&cfg);
    let run = distill(&cfg, &teacher, &data).unwrap();
    assert!(run.logs.iter().all(|l| l.conflict_rate.is_nan() && l.acc_aux.is_nan()));
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let cfg = with(&small_config(), &[("setting", "dhkd"), ("lr", "0")]);
    let (data, teacher) = setup(&cfg);
    let init = init_student(&cfg, &data).unwrap();
    let run = distill(&cfg, &teacher, &data).unwrap();
    assert_eq!(run.model, init);
    let (_, z) = init.infer(data.test.x()).unwrap();
    let hits = z.argmax_rows().iter().zip(data.test.y()).filter(|(p, y)| p == y).count();
    let acc = hits as f64 / data.test.len() as f64;
    assert!(run.logs.iter().all(|l| l.acc_main == acc));
}

#[test]
fn zero_separation_stays_at_chance() {
    let cfg = with(&small_config(), &[("separation", "0"), ("train_per_class", "100"), ("test_per_class", "200")]);
    let data = load_data(&cfg).unwrap();
    let run = train_teacher(&cfg, &data).unwrap();
    let chance = 1.0 / cfg.classes as f64;
    assert!((run.final_acc() - chance).abs() < 0.1, "acc {}", run.final_acc());
}

#[test]
fn diverging_run_is_flagged_and_stopped() {
    let (data, teacher) = setup(&small_config());
    let cfg = with(&small_config(), &[("setting", "ce_plus_bkl"), ("lr", "1e6"), ("epochs", "20")]);
    let run = distill(&cfg, &teacher, &data).unwrap();
    let at = run.collapsed_at.expect("run should collapse");
    assert_eq!(run.logs.len(), at);
    assert!(run.logs.last().unwrap().collapsed);
    assert!(run.logs[..at - 1].iter().all(|l| !l.collapsed));
}

#[test]
fn self_diagnosis_has_zero_correlation_gap() {
    let cfg = small_config();
    let (data, teacher) = setup(&cfg);
    let d = harness::diagnose(&teacher, &teacher, &data.test, cfg.tau, 32).unwrap();
    assert_eq!(d.corr_main.mean_abs, 0.0);
    assert!(d.acc_aux.is_none());
    assert!(d.to_csv().starts_with("metric,value\n"));
}

#[test]
fn default_teacher_regression() {
    let cfg = RunConfig::default();
    let data = load_data(&cfg).unwrap();
    let run = train_teacher(&cfg, &data).unwrap();
    assert_eq!(run.logs.len(), cfg.teacher_epochs);
    assert!(run.final_acc() > 0.9, "teacher accuracy {}", run.final_acc());
}
