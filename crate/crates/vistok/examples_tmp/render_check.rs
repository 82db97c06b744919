use vistok::corpus::synth_document;
use vistok::render::{render_document, save_png, RenderConfig, downscale};
fn main() {
    let doc = synth_document(7, 10, 3).unwrap();
    let cfg = RenderConfig::default();
    let pages = render_document(&doc, &cfg).unwrap();
    println!("pages: {}", pages.len());
    save_png(&pages[0], std::path::Path::new("/tmp/page0.png")).unwrap();
    let small = downscale(&pages[0], 192);
    save_png(&small, std::path::Path::new("/tmp/page0_small.png")).unwrap();
    // training-style config: render at model resolution
    let tcfg = RenderConfig { canvas_px: 192, margin_px: 8, font_size_px: 18, ..Default::default() };
    let tp = render_document(&doc, &tcfg).unwrap();
    println!("train pages: {}", tp.len());
    save_png(&tp[0], std::path::Path::new("/tmp/train_page0.png")).unwrap();
    println!("gt page0:\n{}", &tp[0].ground_truth);
}
