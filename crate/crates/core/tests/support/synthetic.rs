use std::fs;
use std::path::Path;

pub const LABELS: [&str; 4] = ["alpha", "beta", "gamma", "delta"];

const WORDS: [&str; 12] = [
    "river", "stone", "cloud", "ember", "orchid", "signal", "harbor", "lantern", "meadow", "copper", "violet",
    "thunder",
];

fn text(i: usize, label_idx: usize) -> String {
    let a = WORDS[(i * 7 + label_idx) % WORDS.len()];
    let b = WORDS[(i * 5 + 3 * label_idx + 1) % WORDS.len()];
    format!("Item {i}: the {a} near the {b}, variant {}", i % 13)
}

/// Writes `{dir}/{name}/{train.jsonl,test.jsonl,labels.txt}` with a skewed label mix.
pub fn write_dataset(dir: &Path, name: &str, n_train: usize, n_test: usize) {
    let root = dir.join(name);
    fs::create_dir_all(&root).unwrap();
    let label_for = |i: usize| match i % 10 {
        0..=3 => 0,
        4..=6 => 1,
        7..=8 => 2,
        _ => 3,
    };
    let mut train = String::new();
    for i in 0..n_train {
        let l = label_for(i);
        train.push_str(&format!(
            "{{\"id\":\"tr-{i:04}\",\"text\":\"{}\",\"label\":\"{}\"}}\n",
            text(i, l),
            LABELS[l]
        ));
    }
    let mut test = String::new();
    for i in 0..n_test {
        let l = label_for(i + 3);
        test.push_str(&format!(
            "{{\"id\":\"te-{i:04}\",\"text\":\"{}\",\"label\":\"{}\"}}\n",
            text(i + 10_000, l),
            LABELS[l]
        ));
    }
    fs::write(root.join("train.jsonl"), train).unwrap();
    fs::write(root.join("test.jsonl"), test).unwrap();
    fs::write(root.join("labels.txt"), LABELS.join("\n") + "\n").unwrap();
}
