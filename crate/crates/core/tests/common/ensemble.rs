//! Direct-from-definition oracle for the ensemble weight search.

/// Best `(lambda1, accuracy)` over `lambda1 = 0, 0.05, ..., 1`, computing
/// every combined row and its argmax by hand. The first best point wins.
pub fn brute_force_lambda(a: &[[f64; 3]], b: &[[f64; 3]], labels: &[usize]) -> (f64, f64) {
    let mut best = (-1.0, 0.0);
    for i in 0..=20 {
        let l1 = (i as f64 * 0.05).min(1.0);
        let mut correct = 0;
        for s in 0..labels.len() {
            let y: Vec<f64> = (0..3).map(|k| l1 * a[s][k] + (1.0 - l1) * b[s][k]).collect();
            let mut arg = 0;
            for k in 1..3 {
                if y[k] > y[arg] {
                    arg = k;
                }
            }
            correct += usize::from(arg == labels[s]);
        }
        let acc = correct as f64 / labels.len() as f64;
        if acc > best.0 {
            best = (acc, l1);
        }
    }
    (best.1, best.0)
}

pub type LambdaCase = ([[f64; 3]; 3], [[f64; 3]; 3], [usize; 3]);

/// Three-sample cases where the best weight is interior, at an end, or tied.
pub fn lambda_cases() -> Vec<LambdaCase> {
    vec![
        (
            [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.5]],
            [[0.0, 3.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            [0, 0, 2],
        ),
        (
            [[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [3.0, 0.0, 0.0]],
            [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]],
            [0, 1, 2],
        ),
        (
            [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            [1, 0, 0],
        ),
    ]
}
