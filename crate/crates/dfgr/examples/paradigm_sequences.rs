//! How one user sequence becomes model input under each paradigm:
//! interleaved item/action tokens, per-session single-flow samples, and the
//! dual real/fake flow pair.
//!
//! ```bash
//! cargo run --example paradigm_sequences
//! ```

use dfgr::sequence::{
    build_dfgr, build_metagr, build_sfgr_samples, EmbeddingTables, Interaction, Role, TokenBatch,
    UserSequence,
};

fn show(name: &str, batch: &TokenBatch) {
    println!("{name}: T = {}", batch.len());
    print!("  roles     ");
    for r in &batch.roles {
        let c = match r {
            Role::User => 'U',
            Role::History => 'h',
            Role::Candidate => 'C',
            Role::Item => 'v',
            Role::Action => 'a',
        };
        print!("{c:>3}");
    }
    println!();
    print!("  position  ");
    for p in &batch.positions {
        print!("{p:>3}");
    }
    println!();
    print!("  session   ");
    for &s in &batch.session_ids {
        if s == dfgr::sequence::NO_SESSION {
            print!("  -");
        } else {
            print!("{s:>3}");
        }
    }
    println!();
    print!("  loss      ");
    for &m in &batch.label_mask {
        print!("{:>3}", if m { "*" } else { "." });
    }
    println!("\n");
}

fn main() {
    // 9 interactions in sessions of 4, 3, and 2
    let mut interactions = Vec::new();
    for i in 0..9u64 {
        interactions.push(Interaction {
            item_id: i,
            action: (i % 2) as u32,
            timestamp: 1000 + 60 * i,
            session_id: match i {
                0..=3 => 0,
                4..=6 => 1,
                _ => 2,
            },
            slots: vec![],
        });
    }
    let seq = UserSequence::new(42, vec![], interactions).unwrap();
    let tables = EmbeddingTables::zeros(4, 16, 2, &[], &[]);

    println!(
        "one sequence, n = {} interactions, sessions (4, 3, 2)\n",
        seq.len()
    );

    show("interleaved (2n+1 tokens)", &build_metagr(&seq, &tables));

    let samples = build_sfgr_samples(&seq, &tables).unwrap();
    for (i, s) in samples.iter().enumerate() {
        show(&format!("per-session sample {}", i + 1), s);
    }

    let (real, fake) = build_dfgr(&seq, &tables);
    show("dual flow, real side (n+1 tokens, no loss)", &real);
    show("dual flow, fake side (loss at every interaction)", &fake);

    println!(
        "loss positions: interleaved {}, per-session total {}, fake flow {}",
        build_metagr(&seq, &tables).labeled_count(),
        samples.iter().map(TokenBatch::labeled_count).sum::<usize>(),
        fake.labeled_count()
    );
}
