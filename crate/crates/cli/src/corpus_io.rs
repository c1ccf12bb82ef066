//! Corpus directories: one `<label>-<instance>.trace` file per trace.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use wtfpad::traces::{parse_annotated_trace, Corpus};

/// Splits `page007-12` into (`page007`, 12) at the last `-`.
pub fn split_file_stem(stem: &str) -> Option<(&str, usize)> {
    let (label, instance) = stem.rsplit_once('-')?;
    if label.is_empty() {
        return None;
    }
    Some((label, instance.parse().ok()?))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading corpus {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("trace") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let Some((label, instance)) = split_file_stem(&stem) else {
            bail!("{}: expected <label>-<instance>.trace", path.display());
        };
        entries.push((label.to_string(), instance, path));
    }
    if entries.is_empty() {
        bail!("{}: no .trace files", dir.display());
    }
    entries.sort();
    let traces = entries
        .iter()
        .map(|(label, _, path)| {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_annotated_trace(&text, label).with_context(|| format!("parsing {}", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::new(traces)?)
}

pub fn write_corpus(corpus: &Corpus, dir: &Path, annotate: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (trace, instance) in corpus.traces.iter().zip(corpus.instance_numbers()) {
        let path = dir.join(format!("{}-{}.trace", trace.label(), instance));
        fs::write(&path, trace.to_text(annotate)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems() {
        assert_eq!(split_file_stem("page007-12"), Some(("page007", 12)));
        assert_eq!(split_file_stem("a-b-3"), Some(("a-b", 3)));
        assert_eq!(split_file_stem("nodash"), None);
        assert_eq!(split_file_stem("-3"), None);
        assert_eq!(split_file_stem("x-y"), None);
    }
}
