use rfpp_core::field::*;
use rfpp_core::geom::*;
use rfpp_core::solver::*;
use std::time::Instant;

fn main() {
    // Column-sized grid like the n=32 conforming case: 34 x 42 units at h=0.25
    let spec = EnvironmentSpec {
        kernel: KernelSpec::default_bump(),
        squash: SquashSpec::default_logistic(),
        noise: NoiseSpec::gaussian(1),
        grid_spacing: 0.25,
        region: Rect::new(0.0, 34.0, -21.0, 21.0).unwrap(),
    };
    let t0 = Instant::now();
    let psi = build_environment(&spec).unwrap();
    println!("field gen ({}x{} = {} nodes): {:?}", psi.nx(), psi.ny(), psi.nx()*psi.ny(), t0.elapsed());

    let t0 = Instant::now();
    let ew = compute_edge_weights(&psi, Window::full(&psi));
    println!("edge weights: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let n_runs = 20;
    for i in 0..n_runs {
        let src = Point::new(0.0, -20.0 + i as f64 * 2.0);
        let map = arrival_map_on(&psi, &ew, &src).unwrap();
        std::hint::black_box(map.times().len());
    }
    println!("full dijkstra x{}: {:?} ({:?}/run)", n_runs, t0.elapsed(), t0.elapsed()/n_runs);

    // big field like criterion 9 n=128
    let spec2 = EnvironmentSpec {
        kernel: KernelSpec::default_bump(),
        squash: SquashSpec::default_logistic(),
        noise: NoiseSpec::gaussian(2),
        grid_spacing: 0.25,
        region: Rect::new(-1.0, 129.0, -46.0, 46.0).unwrap(),
    };
    let t0 = Instant::now();
    let psi2 = build_environment(&spec2).unwrap();
    println!("big field gen ({} nodes): {:?}", psi2.nx()*psi2.ny(), t0.elapsed());
    let t0 = Instant::now();
    let t = passage_time(&psi2, &Point::new(0.0,0.0), &Point::new(128.0,0.0)).unwrap();
    println!("big passage_time = {:.3}: {:?}", t, t0.elapsed());
}
