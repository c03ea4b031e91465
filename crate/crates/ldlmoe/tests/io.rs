use std::path::Path;

use ldlmoe::io::{parse_series, read_checkpoint, write_checkpoint};
use ldlmoe::AppError;
use ldlmoe_core::synth::{generate, SynthSpec};
use ldlmoe_core::train::{train, TrainConfig};

fn parse(text: &str, series: Option<&str>) -> Result<ldlmoe_core::series::TimeSeries, AppError> {
    parse_series(text.as_bytes(), Path::new("mem.csv"), series)
}

#[test]
fn univariate_with_extra_columns() {
    let s = parse("t,y,trend_true\n0,1.5,0\n1,2.5,0\n2,-1,0\n", None).unwrap();
    assert_eq!(s.target(), &[1.5, 2.5, -1.0]);
    assert_eq!(s.values(), s.target());
    assert_eq!(s.timestamps(), Some(&[0i64, 1, 2][..]));
}

#[test]
fn long_format_with_features() {
    let text = "series_id,t,f_1,f_2,y\na,1,0.1,0.2,5\nb,1,9,9,9\na,2,0.3,0.4,6\nb,2,8,8,8\n";
    let a = parse(text, None).unwrap();
    assert_eq!(a.id, "a");
    assert_eq!(a.dim(), 2);
    assert_eq!(a.values(), &[0.1, 0.2, 0.3, 0.4]);
    assert_eq!(a.target(), &[5.0, 6.0]);
    let b = parse(text, Some("b")).unwrap();
    assert_eq!(b.target(), &[9.0, 8.0]);
    assert!(matches!(parse(text, Some("c")), Err(AppError::Parse { .. })));
}

#[test]
fn malformed_input_is_a_data_error() {
    for bad in [
        "t,value\n0,1\n",
        "y\n1\nabc\n",
        "y\n1\nNaN\n",
        "t,y\n0,1\n0,2\n",
        "t,y\n0.5,1\n",
        "y\n",
    ] {
        let e = parse(bad, None).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{bad:?}: {e}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let series = generate(&SynthSpec {
        len: 160,
        changepoints: vec![(60, 2.0)],
        ..SynthSpec::default()
    })
    .unwrap()
    .to_series("s")
    .unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        hidden_dim: 4,
        n_layers: 1,
        head_hidden: 8,
        gate_hidden: 4,
        horizon: 6,
        window: 10,
        split: ldlmoe_core::series::SplitSpec {
            test_len: 12,
            val_fraction: 0.2,
        },
        ..TrainConfig::default()
    };
    let (ckpt, _) = train(&cfg, &series).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    write_checkpoint(&path, &ckpt).unwrap();
    let back = read_checkpoint(&path).unwrap();
    for (a, b) in ckpt.params.params.iter().zip(&back.params.params) {
        let bits = |t: &ldlmoe_core::autodiff::Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    assert_eq!(back, ckpt);
    assert_eq!(back.params.fingerprint(), ckpt.params.fingerprint());
}

#[test]
fn unsupported_checkpoint_version_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(&path, "{\"format_version\": 99}").unwrap();
    assert_eq!(read_checkpoint(&path).unwrap_err().exit_code(), 2);
}

#[test]
fn partial_config_keeps_nested_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cfg.json");
    std::fs::write(&p, r#"{"max_epochs": 7, "split": {"test_len": 40}, "loss": {"balance": 0.5}}"#).unwrap();
    let c = ldlmoe::io::read_config(&p).unwrap();
    let d = TrainConfig::default();
    assert_eq!(c.max_epochs, 7);
    assert_eq!(c.split.test_len, 40);
    assert_eq!(c.split.val_fraction, d.split.val_fraction);
    assert_eq!(c.loss.balance, 0.5);
    assert_eq!(c.loss.diversity, d.loss.diversity);
    assert_eq!(c.enhance, d.enhance);

    std::fs::write(&p, r#"{"max_epochs": "many"}"#).unwrap();
    assert_eq!(ldlmoe::io::read_config(&p).unwrap_err().exit_code(), 1);
}
