//! Accumulates a confusion matrix over two samples and reports per-class IoU.
//!
//! cargo run --example miou

use ndarray::array;
use ovseg::eval::ConfusionMatrix;

fn main() {
    let names = ["background", "cat", "dog"];
    let mut cm = ConfusionMatrix::new(names.len());
    let truth = array![[0u32, 0, 1], [1, 1, 255]];
    let pred = array![[0u32, 1, 1], [1, 0, 2]];
    cm.add(&truth, &pred, 255).expect("shapes match");
    let truth = array![[2u32, 2], [0, 0]];
    let pred = array![[2u32, 0], [0, 0]];
    cm.add(&truth, &pred, 255).expect("shapes match");

    println!("{} counted pixels", cm.total());
    for (name, iou) in names.iter().zip(cm.per_class_iou()) {
        match iou {
            Some(v) => println!("{name:<10} {v:.4}"),
            None => println!("{name:<10} absent"),
        }
    }
    println!("mIoU            {:.4}", cm.miou(None).unwrap_or(f64::NAN));
    println!("mIoU w/o bg     {:.4}", cm.miou(Some(0)).unwrap_or(f64::NAN));
}
