use familykit_wasm::Demo;
use serde_json::Value;

fn trained() -> Demo {
    let mut demo = Demo::try_new(5, 60).unwrap();
    let mut last: Value = Value::Null;
    while !demo.done() {
        last = serde_json::from_str(&demo.try_train(25).unwrap()).unwrap();
    }
    assert_eq!(last["step"], 60);
    assert_eq!(last["losses"].as_array().unwrap().len(), 2);
    demo
}

#[test]
fn demo_operations_return_consistent_json() {
    let demo = trained();

    // Lower thresholds never exit deeper on average.
    let depth = |tau: f64| {
        let g: Value = serde_json::from_str(&demo.try_generate("The fox", tau, 24).unwrap()).unwrap();
        assert_eq!(g["tokens"].as_array().unwrap().len(), 24);
        g["mean_depth"].as_f64().unwrap()
    };
    let (shallow, deep) = (depth(0.0), depth(1.1));
    assert_eq!(shallow, 2.0);
    assert_eq!(deep, 4.0);

    let h: Value = serde_json::from_str(&demo.try_cosine("A fox sat", 1).unwrap()).unwrap();
    let scores = h["scores"].as_array().unwrap();
    assert_eq!(h["tokens"].as_array().unwrap().len(), 9);
    assert_eq!(scores.len(), h["layers"].as_array().unwrap().len());
    for row in scores {
        for s in row.as_array().unwrap() {
            assert!(s.as_f64().unwrap().abs() <= 1.0 + 1e-9);
        }
    }

    let name = demo.projection_names().into_iter().find(|n| n.ends_with("lm_proj")).unwrap();
    let c: Value = serde_json::from_str(&demo.try_rank_curve(&name).unwrap()).unwrap();
    let loss: Vec<f64> = c["loss"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(loss.len(), 32);
    assert!(loss.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    assert!(*loss.last().unwrap() < 1e-3 * loss[0]);

    assert!(demo.try_rank_curve("no.such.matrix").is_err());
    assert!(demo.try_cosine("", 0).is_err());
}
