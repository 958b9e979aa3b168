use klsplit::problems::*;
fn main() {
    let inst = generate_decomposition(12, 12, 2, 6, 10.0, 3).unwrap();
    let x = inst.x_true.clone().unwrap();
    let y = inst.y_true.clone().unwrap();
    let (x1, y1) = aapm_step(&inst, &x, &y, 0.5, 0.5).unwrap();
    println!("x drift = {:.3e} (norm {:.3e})", (&x1 - &x).norm(), x.norm());
    println!("y drift = {:.3e} (norm {:.3e})", (&y1 - &y).norm(), y.norm());
    let (_, sv, _) = klsplit::metric::svd_descending(&x).unwrap();
    println!("sv = {:.3e} {:.3e} {:.3e} {:.3e}", sv[0], sv[1], sv[2], sv[3]);
}
