use crate::data::BoundingBox;

/// Centre-offset / log-size regression target of `gt` relative to `anchor`.
pub fn encode_box(anchor: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(anchor: &BoundingBox, [tx, ty, tw, th]: [f64; 4]) -> BoundingBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + tx * aw;
    let cy = acy + ty * ah;
    let w = aw * tw.exp();
    let h = ah * th.exp();
    BoundingBox {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    }
}

/// Per-coordinate scale applied to regression targets inside the heads, so
/// the four outputs have comparable magnitude.
pub(crate) const DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Caps `tw`/`th` before exponentiation when decoding network outputs.
pub(crate) const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)

pub(crate) fn decode_scaled(anchor: &BoundingBox, raw: [f64; 4]) -> BoundingBox {
    let d = [
        raw[0] * DELTA_STD[0],
        raw[1] * DELTA_STD[1],
        (raw[2] * DELTA_STD[2]).min(MAX_LOG_SCALE),
        (raw[3] * DELTA_STD[3]).min(MAX_LOG_SCALE),
    ];
    decode_box(anchor, d)
}

pub(crate) fn encode_scaled(anchor: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    let t = encode_box(anchor, gt);
    [
        t[0] / DELTA_STD[0],
        t[1] / DELTA_STD[1],
        t[2] / DELTA_STD[2],
        t[3] / DELTA_STD[3],
    ]
}
