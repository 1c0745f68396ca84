//! The building blocks of the rewrite on a tiny layer: folding batch norm
//! into a convolution from either side, turning a shortcut into a kernel,
//! and summing aligned branches into one convolution.

use csrep::reparam::{fuse_bn_first, fuse_conv_first, identity_conv, merge_branches, pad_context};
use csrep::runtime::{batchnorm_infer, conv1d};
use csrep::{BatchNormParams, TdnnLayer, Tensor3};

fn main() -> csrep::Result<()> {
    let conv = TdnnLayer::new(
        vec![0.5, -1.0, 0.25, 2.0, 1.0, -0.5],
        vec![0.1, -0.2],
        1,
        2,
        3,
        1,
        1,
    )?;
    let bn_in = BatchNormParams::new(vec![0.3], vec![2.0], vec![1.5], vec![-0.4], 1e-5)?;
    let bn_out = BatchNormParams::new(
        vec![0.2, -0.1],
        vec![0.5, 1.5],
        vec![1.0, 0.8],
        vec![0.05, 0.0],
        1e-5,
    )?;
    let x = Tensor3::new(vec![1.0, -2.0, 0.5, 3.0, 0.0], 1, 1, 5)?;

    let bn_first = fuse_bn_first(&bn_in, &conv)?;
    let two_op = conv1d(&batchnorm_infer(&x, &bn_in)?, &conv)?;
    println!(
        "bn -> conv:  max diff {:.2e}",
        conv1d(&x, &bn_first)?.max_abs_diff(&two_op)
    );

    let conv_first = fuse_conv_first(&conv, &bn_out)?;
    let two_op = batchnorm_infer(&conv1d(&x, &conv)?, &bn_out)?;
    println!(
        "conv -> bn:  max diff {:.2e}",
        conv1d(&x, &conv_first)?.max_abs_diff(&two_op)
    );

    let square = TdnnLayer::new(
        vec![0.2, 0.4, -0.1, 0.3, 0.0, 0.6, 1.0, -1.0, 0.5, 0.1, 0.2, 0.3],
        vec![0.0, 0.1],
        2,
        2,
        3,
        1,
        1,
    )?;
    let pointwise = TdnnLayer::new(vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.5], 2, 2, 1, 1, 1)?;
    let shortcut = identity_conv(2, 1, 1)?;
    let merged = merge_branches(&[
        square.clone(),
        pad_context(&pointwise, 3)?,
        pad_context(&shortcut, 3)?,
    ])?;
    let y = Tensor3::new(vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0, -0.5, 0.25], 1, 2, 4)?;
    let branches = conv1d(&y, &square)?
        .add(&conv1d(&y, &pointwise)?)?
        .add(&y)?;
    println!(
        "3 branches:  max diff {:.2e}",
        conv1d(&y, &merged)?.max_abs_diff(&branches)
    );
    println!("merged kernel: {:?}", merged.weight());
    Ok(())
}
