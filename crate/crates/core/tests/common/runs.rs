//! Small end-to-end configurations and metrics-file readers.

use std::path::Path;

use ssfl::config::TrainConfig;
use ssfl::metrics::METRICS_COLUMNS;

/// A few-second training setup on a tiny synthetic task.
pub fn tiny_train_config(out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::parse(
        "train_data = synth:per_class=6,sigma=0.3,seed=3,size=8,jitter=1\n\
         test_data = synth:per_class=3,sigma=0.3,seed=4,size=8,jitter=1\n\
         in_channels = 3\n\
         in_size = 8\n\
         num_classes = 4\n\
         stages = 4x1,6x1,8x1\n\
         epochs = 3\n\
         batch_size = 8\n\
         milestones = 1,2\n\
         dtype = f64\n",
    )
    .expect("valid tiny config");
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// Header and records of a metrics file; comment lines are skipped and the
/// wall-clock column is dropped.
pub fn read_metrics(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_path(path)
        .expect("metrics file");
    let header: Vec<String> = reader.headers().expect("header").iter().map(str::to_string).collect();
    assert_eq!(header, METRICS_COLUMNS);
    let seconds = header.iter().position(|h| h == "seconds").expect("seconds column");
    let rows = reader
        .records()
        .map(|r| {
            let r = r.expect("well-formed record");
            r.iter().enumerate().filter(|(i, _)| *i != seconds).map(|(_, v)| v.to_string()).collect()
        })
        .collect();
    (header, rows)
}
