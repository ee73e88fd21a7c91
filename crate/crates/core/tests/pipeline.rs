use hydroscan::baselines::ClimatologyTable;
use hydroscan::data::{generate_dataset, Dataset, SampleSpec};
use hydroscan::evaluation::{climatology_table, evaluate, fit_thresholds, model_forecasts, observed};
use hydroscan::hydrology::FloodThresholds;
use hydroscan::model::{Model, ModelConfig, ModelOrders};
use hydroscan::training::{fit, InputNorm, LossConfig, Prepared, TrainConfig};
use hydroscan::Tensor;

fn small() -> (Dataset, ModelConfig) {
    let spec = SampleSpec {
        hindcast_steps: 2,
        lead_times: 3,
        ..SampleSpec::default()
    };
    let data = generate_dataset(21, 14, 1900, spec).unwrap();
    let cfg = ModelConfig {
        hindcast_steps: 2,
        lead_times: 3,
        hidden: 8,
        hres_hidden: 4,
        hindcast_depths: vec![1, 1],
        d_state: 2,
        head_hidden: 8,
        era5_embed: 4,
        glofas_embed: 2,
        cpc_embed: 2,
        ..ModelConfig::default()
    };
    (data, cfg)
}

#[test]
fn saved_artifacts_reproduce_forecasts() {
    let (data, cfg) = small();
    let dir = tempfile::tempdir().unwrap();
    let splits = data.split(0.7, 0.15).unwrap();
    let th = fit_thresholds(&data, data.sim.days).unwrap();
    let norm = InputNorm::compute(&data, &splits.train).unwrap();
    let prep = Prepared::new(&data, norm.clone(), LossConfig::default(), &th, cfg.positional_encoding).unwrap();
    let orders = ModelOrders::build(&data.points, &cfg).unwrap();
    let mut model = Model::new(cfg, 5).unwrap();
    let train = TrainConfig {
        epochs: 2,
        steps_per_epoch: Some(8),
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let val: Vec<usize> = splits.val.iter().step_by(10).copied().collect();
    let report = fit(&mut model, &prep, &splits.train, &val, &orders, &train, 5, |_| {}).unwrap();
    assert_eq!(report.trace.len(), 3);
    assert!(report.final_train_loss.is_finite());

    model.save(&dir.path().join("m.rsnn")).unwrap();
    norm.save(&dir.path().join("norm.toml")).unwrap();
    data.save(&dir.path().join("d.rsds")).unwrap();
    let mut buf = Vec::new();
    th.write_csv(&mut buf).unwrap();

    let data2 = Dataset::load(&dir.path().join("d.rsds")).unwrap();
    let th2 = FloodThresholds::read_csv(buf.as_slice()).unwrap();
    assert_eq!(th2, th);
    let model2 = Model::load(&dir.path().join("m.rsnn")).unwrap();
    let norm2 = InputNorm::load(&dir.path().join("norm.toml")).unwrap();
    let prep2 = Prepared::new(&data2, norm2, LossConfig::default(), &th2, model2.config.positional_encoding).unwrap();
    let orders2 = ModelOrders::build(&data2.points, &model2.config).unwrap();

    let days = &splits.test[..5];
    let a = model_forecasts(&model, &prep, days, &orders).unwrap();
    let b = model_forecasts(&model2, &prep2, days, &orders2).unwrap();
    assert_eq!(a, b);
    // missing values are NaN, so compare bit patterns
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for d in days {
        let (x, y) = (data.sample(*d).unwrap(), data2.sample(*d).unwrap());
        for (a, b) in [(&x.era5, &y.era5), (&x.glofas, &y.glofas), (&x.cpc, &y.cpc), (&x.hres, &y.hres), (&x.target, &y.target)] {
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn observations_score_perfectly_against_themselves() {
    let (data, _) = small();
    let splits = data.split(0.7, 0.15).unwrap();
    let th = fit_thresholds(&data, data.sim.days).unwrap();
    let ids: Vec<u64> = data.points.points().iter().map(|p| p.id).collect();
    let obs = observed(&data, &splits.test).unwrap();
    let report = evaluate(&obs, &obs, &ids, &th).unwrap();
    let agg = report.aggregate(None).unwrap();
    assert_eq!(agg.kge.mean, 1.0);
    assert_eq!(agg.r2.median, 1.0);
    if let Some(f1) = agg.f1 {
        assert_eq!(f1.mean, 1.0);
    }
}

#[test]
fn climatology_quantiles_survive_csv() {
    let (data, _) = small();
    let table = climatology_table(&data, 1400).unwrap();
    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let back = ClimatologyTable::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.point_ids, table.point_ids);
    let bits = |t: &ClimatologyTable| t.quantiles.iter().flatten().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&table));
}
