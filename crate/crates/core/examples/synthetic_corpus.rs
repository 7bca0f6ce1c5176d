//! Generate a small grounded corpus, write it to disk and read it back.

use qsvlm::data::{corpus_hash, generate_corpus, read_corpus, write_corpus, GenConfig};

pub fn run_example() -> qsvlm::Result<()> {
    let gen = GenConfig::default();
    let samples = generate_corpus(6, &gen, 7)?;
    for s in &samples {
        println!("#{} motifs {:?}", s.index, s.motif_kinds());
        println!("   {}", s.report);
        for (k, b) in s.boxes.iter().enumerate() {
            if let Some(b) = b {
                println!("   sentence {k} -> box ({}, {})..({}, {})", b.x0, b.y0, b.x1, b.y1);
            }
        }
    }

    let dir = tempfile::tempdir()?;
    write_corpus(dir.path(), &samples)?;
    let back = read_corpus(dir.path())?;
    assert_eq!(back.len(), samples.len());
    println!("corpus hash {}", corpus_hash(dir.path())?);

    // one motif kind per image, for classification tasks
    let single = generate_corpus(4, &gen.single_motif(), 8)?;
    for s in &single {
        println!("single-motif #{}: class {:?}", s.index, s.single_class());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
