//! Pointwise activations. Backward passes take the saved *output*, which
//! is enough to recover the local slope for all three functions.

use super::Feat;

pub fn relu(x: &Feat) -> Feat {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(y: &Feat, gy: &Feat) -> Feat {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &yv| {
        if yv <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn leaky_relu(x: &Feat, slope: f32) -> Feat {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(y: &Feat, slope: f32, gy: &Feat) -> Feat {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &yv| {
        if yv < 0.0 {
            *g *= slope;
        }
    });
    gx
}

pub fn sigmoid(x: &Feat) -> Feat {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(y: &Feat, gy: &Feat) -> Feat {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &yv| {
        *g *= yv * (1.0 - yv);
    });
    gx
}
