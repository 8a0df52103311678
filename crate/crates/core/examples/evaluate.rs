use hkfr::metrics::{hit_rank, hr_at_k, ndcg_at_k, EvalCase};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cases = vec![
        EvalCase::new(["Sichuan", "Dessert", "BBQ"], "sichuan"),
        EvalCase::new(["Sichuan", "Dessert", "BBQ"], "BBQ"),
        EvalCase::new(
            [
                "Hot Pot",
                "Dessert",
                "BBQ",
                "Noodles",
                "Bakery",
                "Sushi",
                "Cantonese",
            ],
            "Cantonese",
        ),
        EvalCase::new(Vec::<String>::new(), "Dessert"),
    ];
    for c in &cases {
        println!(
            "{:<10} rank {:?}",
            c.label_value,
            hit_rank(&c.predicted, &c.label_value)
        );
    }
    for k in [5, 10] {
        println!(
            "HR@{k} {:.4}  NDCG@{k} {:.4}",
            hr_at_k(&cases, k)?,
            ndcg_at_k(&cases, k)?
        );
    }
    Ok(())
}
