#[test]
fn dbg_matmul() {
    use condense_core::tensor::{backward, Var};
    use ndarray::arr2;
    let a = Var::param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
    let b = Var::param(arr2(&[[5.0], [6.0]]).into_dyn());
    let m = a.matmul(&b);
    println!("m = {:?}", m.value());
    let y = m.sum_all();
    let g = backward(&y, &[&a, &b], false);
    println!("ga = {:?} strides {:?}", g[0].value(), g[0].value().strides());
    println!("gb = {:?}", g[1].value());
    let bt = b.permute(&[1,0]);
    println!("bt = {:?}", bt.value());
}
