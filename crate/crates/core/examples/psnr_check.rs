use derain_core::fixtures::{render_pair, FixtureSpec};
use derain_core::imaging::psnr;
use derain_core::metrics::ssim_index;

fn main() {
    let spec = FixtureSpec { count: 16, seed: 3, ..FixtureSpec::default() };
    let mut psum = 0.0;
    let mut ssum = 0.0;
    for i in 0..spec.count {
        let (clean, rainy, n) = render_pair(&spec, i);
        let p = psnr(&rainy, &clean);
        let s = ssim_index(rainy.tensor(), clean.tensor());
        println!("pair {i:2}: psnr {p:6.2} dB  ssim {s:.4}  streaks {n}");
        psum += p; ssum += s;
    }
    println!("mean: psnr {:.2} dB  ssim {:.4}", psum / 16.0, ssum / 16.0);
}
