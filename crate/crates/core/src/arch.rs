//! Compact architecture strings such as
//! `1x28x28-32C5P0-MP2S2-32C5P0-MP2S2-H32-D0.5-H10`.
//!
//! Tokens are separated by `-`:
//!
//! | token        | meaning                                                |
//! |--------------|--------------------------------------------------------|
//! | `CxHxW`      | input with `C` channels of `H`x`W` pixels (first only)  |
//! | `<n>C<k>P<p>`| convolution, `n` filters of `k`x`k`, zero padding `p`   |
//! | `MP<k>S<s>`  | max pooling over `k`x`k` windows with stride `s`        |
//! | `H<n>`       | fully connected layer with `n` units                    |
//! | `D<p>`       | dropout with drop probability `p`                       |
//!
//! A softmax always follows the last layer. Convolutions have stride 1 and a
//! ReLU. The first fully connected layer is the knob: it is linear and its
//! width is the hash code length. The last fully connected layer is the
//! linear classifier feeding the softmax.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("empty architecture string")]
    Empty,
    #[error("missing input token (expected CxHxW), found {0:?}")]
    MissingInput(String),
    #[error("malformed token #{index}: {token:?}")]
    Malformed { index: usize, token: String },
    #[error("token #{index} ({token:?}): dimension must be positive")]
    NonPositive { index: usize, token: String },
    #[error("token #{index} ({token:?}): drop probability must lie in [0, 1)")]
    BadDropout { index: usize, token: String },
    #[error("dropout at token #{index} is not followed by any layer")]
    DanglingDropout { index: usize },
    #[error("architecture has no layers after the input")]
    NoLayers,
    #[error("the last non-dropout layer must be fully connected (classifier)")]
    NoClassifier,
    #[error("layer {layer}: {reason}")]
    Shape { layer: usize, reason: String },
    #[error("architecture has no fully connected knob layer")]
    NoKnob,
}

/// Input or activation extent of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Spatial { c, h, w } => write!(f, "({c},{h},{w})"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        padding: usize,
        relu: bool,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    FullyConnected {
        units: usize,
        relu: bool,
    },
    Dropout {
        p: f64,
    },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                filters,
                kernel,
                padding,
                ..
            } => write!(f, "{filters}C{kernel}P{padding}"),
            LayerSpec::MaxPool { window, stride } => write!(f, "MP{window}S{stride}"),
            LayerSpec::FullyConnected { units, .. } => write!(f, "H{units}"),
            // `{}` on f64 is the shortest round-tripping form, so 0.20 -> "0.2".
            LayerSpec::Dropout { p } => write!(f, "D{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

/// Output shape and parameter count of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub index: usize,
    pub output: ActShape,
    pub params: usize,
}

impl ArchSpec {
    /// A softmax is always appended after the final layer.
    pub fn has_softmax(&self) -> bool {
        true
    }

    pub fn input_shape(&self) -> ActShape {
        let (c, h, w) = self.input;
        ActShape::Spatial { c, h, w }
    }

    /// Index of the knob: the first fully connected layer.
    pub fn knob_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::FullyConnected { .. }))
    }

    /// Index of the classifier: the last fully connected layer.
    pub fn classifier_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::FullyConnected { .. }))
    }

    pub fn knob_width(&self) -> Option<usize> {
        self.knob_index().map(|i| match self.layers[i] {
            LayerSpec::FullyConnected { units, .. } => units,
            _ => unreachable!(),
        })
    }

    pub fn num_classes(&self) -> usize {
        match self.classifier_index().map(|i| &self.layers[i]) {
            Some(LayerSpec::FullyConnected { units, .. }) => *units,
            _ => 0,
        }
    }

    pub fn param_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.has_params()).count()
    }

    /// Returns a copy with the knob resized to `units` and the dropout right
    /// after the knob set to `dropout` (inserted when absent). The knob must
    /// not be the classifier.
    pub fn with_knob(&self, units: usize, dropout: f64) -> Result<ArchSpec, ArchError> {
        let knob = self.knob_index().ok_or(ArchError::NoKnob)?;
        if Some(knob) == self.classifier_index() {
            return Err(ArchError::NoKnob);
        }
        let mut layers = self.layers.clone();
        layers[knob] = LayerSpec::FullyConnected { units, relu: false };
        match layers.get_mut(knob + 1) {
            Some(LayerSpec::Dropout { p }) => *p = dropout,
            _ => layers.insert(knob + 1, LayerSpec::Dropout { p: dropout }),
        }
        let spec = ArchSpec {
            input: self.input,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), ArchError> {
        let last = self
            .layers
            .iter()
            .rposition(|l| !matches!(l, LayerSpec::Dropout { .. }))
            .ok_or(ArchError::NoLayers)?;
        if !matches!(self.layers[last], LayerSpec::FullyConnected { .. }) {
            return Err(ArchError::NoClassifier);
        }
        if let Some(LayerSpec::Dropout { .. }) = self.layers.last() {
            return Err(ArchError::DanglingDropout {
                index: self.layers.len(),
            });
        }
        infer_shapes(self).map(|_| ())
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.input;
        write!(f, "{c}x{h}x{w}")?;
        for layer in &self.layers {
            write!(f, "-{layer}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for ArchSpec {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_arch(s)
    }
}

/// Splits `s` at the first non-digit, returning the leading number and the rest.
fn leading_uint(s: &str) -> Option<(usize, &str)> {
    let end = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    if end == 0 {
        return None;
    }
    s[..end].parse().ok().map(|n| (n, &s[end..]))
}

/// Parses a whole token as exactly one unsigned integer.
fn whole_uint(s: &str) -> Option<usize> {
    match leading_uint(s) {
        Some((n, "")) => Some(n),
        _ => None,
    }
}

fn parse_input(token: &str) -> Option<(usize, usize, usize)> {
    let mut it = token.split('x');
    let c = whole_uint(it.next()?)?;
    let h = whole_uint(it.next()?)?;
    let w = whole_uint(it.next()?)?;
    if it.next().is_some() {
        return None;
    }
    Some((c, h, w))
}

fn parse_layer(index: usize, token: &str) -> Result<LayerSpec, ArchError> {
    let malformed = || ArchError::Malformed {
        index,
        token: token.to_string(),
    };
    let non_positive = || ArchError::NonPositive {
        index,
        token: token.to_string(),
    };

    let layer = if let Some(rest) = token.strip_prefix("MP") {
        let (window, rest) = leading_uint(rest).ok_or_else(malformed)?;
        let stride = rest
            .strip_prefix('S')
            .and_then(whole_uint)
            .ok_or_else(malformed)?;
        if window == 0 || stride == 0 {
            return Err(non_positive());
        }
        LayerSpec::MaxPool { window, stride }
    } else if let Some(rest) = token.strip_prefix('H') {
        let units = whole_uint(rest).ok_or_else(malformed)?;
        if units == 0 {
            return Err(non_positive());
        }
        LayerSpec::FullyConnected { units, relu: false }
    } else if let Some(rest) = token.strip_prefix('D') {
        if rest.is_empty() || !rest.chars().all(|c| c.is_ascii_digit() || c == '.') {
            return Err(malformed());
        }
        let p: f64 = rest.parse().map_err(|_| malformed())?;
        if !(0.0..1.0).contains(&p) {
            return Err(ArchError::BadDropout {
                index,
                token: token.to_string(),
            });
        }
        LayerSpec::Dropout { p }
    } else {
        let (filters, rest) = leading_uint(token).ok_or_else(malformed)?;
        let rest = rest.strip_prefix('C').ok_or_else(malformed)?;
        let (kernel, rest) = leading_uint(rest).ok_or_else(malformed)?;
        let padding = rest
            .strip_prefix('P')
            .and_then(whole_uint)
            .ok_or_else(malformed)?;
        if filters == 0 || kernel == 0 {
            return Err(non_positive());
        }
        LayerSpec::Conv {
            filters,
            kernel,
            padding,
            relu: true,
        }
    };
    Ok(layer)
}

/// Parses and validates an architecture string.
pub fn parse_arch(spec: &str) -> Result<ArchSpec, ArchError> {
    if spec.is_empty() {
        return Err(ArchError::Empty);
    }
    let tokens: Vec<&str> = spec.split('-').collect();
    let input = parse_input(tokens[0]).ok_or_else(|| ArchError::MissingInput(tokens[0].into()))?;
    if input.0 == 0 || input.1 == 0 || input.2 == 0 {
        return Err(ArchError::NonPositive {
            index: 0,
            token: tokens[0].into(),
        });
    }

    let mut layers = tokens[1..]
        .iter()
        .enumerate()
        .map(|(i, t)| parse_layer(i + 1, t))
        .collect::<Result<Vec<_>, _>>()?;
    if layers.is_empty() {
        return Err(ArchError::NoLayers);
    }
    if let Some(LayerSpec::Dropout { .. }) = layers.last() {
        return Err(ArchError::DanglingDropout {
            index: tokens.len() - 1,
        });
    }

    // Knob and classifier are linear; any fully connected layer between them
    // is an ordinary hidden layer with a ReLU.
    let fc: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::FullyConnected { .. }))
        .map(|(i, _)| i)
        .collect();
    if fc.len() > 2 {
        for &i in &fc[1..fc.len() - 1] {
            if let LayerSpec::FullyConnected { relu, .. } = &mut layers[i] {
                *relu = true;
            }
        }
    }

    let arch = ArchSpec { input, layers };
    arch.validate()?;
    Ok(arch)
}

/// Canonical string form; inverse of [`parse_arch`].
pub fn format_arch(spec: &ArchSpec) -> String {
    spec.to_string()
}

/// Output shape and parameter count of every layer.
pub fn infer_shapes(spec: &ArchSpec) -> Result<Vec<LayerShape>, ArchError> {
    let mut shape = spec.input_shape();
    let mut out = Vec::with_capacity(spec.layers.len());
    for (index, layer) in spec.layers.iter().enumerate() {
        let shape_err = |reason: String| ArchError::Shape {
            layer: index,
            reason,
        };
        let (next, params) = match *layer {
            LayerSpec::Conv {
                filters,
                kernel,
                padding,
                ..
            } => {
                let ActShape::Spatial { c, h, w } = shape else {
                    return Err(shape_err("convolution after a flattened layer".into()));
                };
                let side = |s: usize| (s + 2 * padding + 1).checked_sub(kernel).filter(|&o| o >= 1);
                match (side(h), side(w)) {
                    (Some(oh), Some(ow)) => (
                        ActShape::Spatial {
                            c: filters,
                            h: oh,
                            w: ow,
                        },
                        kernel * kernel * c * filters + filters,
                    ),
                    _ => {
                        return Err(shape_err(format!(
                            "kernel {kernel} with padding {padding} does not fit input {shape}"
                        )))
                    }
                }
            }
            LayerSpec::MaxPool { window, stride } => {
                let ActShape::Spatial { c, h, w } = shape else {
                    return Err(shape_err("pooling after a flattened layer".into()));
                };
                if window > h || window > w {
                    return Err(shape_err(format!(
                        "pooling window {window} exceeds input {shape}"
                    )));
                }
                (
                    ActShape::Spatial {
                        c,
                        h: (h - window) / stride + 1,
                        w: (w - window) / stride + 1,
                    },
                    0,
                )
            }
            LayerSpec::FullyConnected { units, .. } => {
                (ActShape::Flat(units), shape.len() * units + units)
            }
            LayerSpec::Dropout { .. } => (shape, 0),
        };
        shape = next;
        out.push(LayerShape {
            index,
            output: shape,
            params,
        });
    }
    Ok(out)
}

/// Total number of learnable parameters.
pub fn param_count(spec: &ArchSpec) -> Result<usize, ArchError> {
    Ok(infer_shapes(spec)?.iter().map(|l| l.params).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MNIST: &str = "1x28x28-32C5P0-MP2S2-32C5P0-MP2S2-H32-D0.5-H10";
    const CIFAR: &str = "3x32x32-32C3P1-32C1P0-MP3S2-D0.5-32C3P1-32C3P1-MP3S2-D0.5-64C3P1-64C3P1-MP3S2-D0.5-H32-D0.5-H10";

    #[test]
    fn parses_paper_models() {
        let m = parse_arch(MNIST).unwrap();
        assert_eq!(m.input, (1, 28, 28));
        assert_eq!(m.layers.len(), 7);
        assert_eq!(m.knob_index(), Some(4));
        assert_eq!(m.classifier_index(), Some(6));

        let c = parse_arch(CIFAR).unwrap();
        assert_eq!(c.input, (3, 32, 32));
        assert_eq!(c.layers.len(), 15);
        assert_eq!(c.knob_width(), Some(32));
    }

    #[test]
    fn minimal_classifier_only() {
        let a = parse_arch("1x28x28-H10").unwrap();
        assert_eq!(a.layers.len(), 1);
        assert_eq!(a.num_classes(), 10);
    }

    #[test]
    fn relu_assignment() {
        let a = parse_arch("1x8x8-4C3P1-H16-H8-H4").unwrap();
        assert!(matches!(a.layers[0], LayerSpec::Conv { relu: true, .. }));
        assert!(matches!(a.layers[1], LayerSpec::FullyConnected { relu: false, .. }));
        assert!(matches!(a.layers[2], LayerSpec::FullyConnected { relu: true, .. }));
        assert!(matches!(a.layers[3], LayerSpec::FullyConnected { relu: false, .. }));
    }

    #[test]
    fn mnist_shapes_and_params() {
        let shapes = infer_shapes(&parse_arch(MNIST).unwrap()).unwrap();
        let sp = |c, h, w| ActShape::Spatial { c, h, w };
        let expected = [
            sp(32, 24, 24),
            sp(32, 12, 12),
            sp(32, 8, 8),
            sp(32, 4, 4),
            ActShape::Flat(32),
            ActShape::Flat(32),
            ActShape::Flat(10),
        ];
        for (s, e) in shapes.iter().zip(expected) {
            assert_eq!(s.output, e);
        }
        assert_eq!(shapes[0].params, 832);
        assert_eq!(shapes[2].params, 5 * 5 * 32 * 32 + 32);
        assert_eq!(shapes[4].params, 512 * 32 + 32);
        assert_eq!(shapes[6].params, 330);
    }

    #[test]
    fn cifar_param_count() {
        // 896 + 1056 + 9248 + 9248 + 18496 + 36928 + 18464 + 330
        assert_eq!(param_count(&parse_arch(CIFAR).unwrap()).unwrap(), 94_666);
    }

    #[test]
    fn tiny_shapes() {
        let a = parse_arch("1x5x5-1C5P0-H2").unwrap();
        let s = infer_shapes(&a).unwrap();
        assert_eq!(s[0].output, ActShape::Spatial { c: 1, h: 1, w: 1 });
        assert_eq!(s[0].params, 26);

        let a = parse_arch("1x4x4-MP2S2-H2").unwrap();
        let s = infer_shapes(&a).unwrap();
        assert_eq!(s[0].output, ActShape::Spatial { c: 1, h: 2, w: 2 });
        assert_eq!(s[0].params, 0);
    }

    #[test]
    fn pooling_drops_partial_windows() {
        let a = parse_arch("1x7x7-MP2S2-H2").unwrap();
        let s = infer_shapes(&a).unwrap();
        assert_eq!(s[0].output, ActShape::Spatial { c: 1, h: 3, w: 3 });
    }

    #[test]
    fn formats_canonically() {
        assert_eq!(format_arch(&parse_arch(MNIST).unwrap()), MNIST);
        assert_eq!(format_arch(&parse_arch(CIFAR).unwrap()), CIFAR);
        let a = parse_arch("1x28x28-H16-D0.20-H10").unwrap();
        assert_eq!(format_arch(&a), "1x28x28-H16-D0.2-H10");
        let a = parse_arch("1x28x28-H16-D0-H10").unwrap();
        assert_eq!(format_arch(&a), "1x28x28-H16-D0-H10");
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse_arch("1x28x28-32C5-H10"),
            Err(ArchError::Malformed {
                index: 1,
                token: "32C5".into()
            })
        );
        assert!(matches!(parse_arch("32C5P0-H10"), Err(ArchError::MissingInput(_))));
        assert!(matches!(parse_arch("1x28x28-H10-D0.5"), Err(ArchError::DanglingDropout { .. })));
        assert!(matches!(parse_arch("0x28x28-H10"), Err(ArchError::NonPositive { index: 0, .. })));
        assert!(matches!(parse_arch("1x28x28-H0"), Err(ArchError::NonPositive { index: 1, .. })));
        assert!(matches!(parse_arch("1x28x28-MP0S2-H10"), Err(ArchError::NonPositive { .. })));
        assert!(matches!(parse_arch("1x28x28-H10-D1.0-H2"), Err(ArchError::BadDropout { .. })));
        assert!(matches!(parse_arch("1x28x28-32C5P0"), Err(ArchError::NoClassifier)));
        assert!(matches!(parse_arch("1x28x28"), Err(ArchError::NoLayers)));
        assert!(matches!(parse_arch("1x4x4-8C7P0-H10"), Err(ArchError::Shape { layer: 0, .. })));
        assert!(matches!(parse_arch("1x28x28-h10"), Err(ArchError::Malformed { .. })));
        assert!(matches!(parse_arch("1x28x28-H10 "), Err(ArchError::Malformed { .. })));
        assert!(matches!(parse_arch("1x28x28-H10-2C3P0-H10"), Err(ArchError::Shape { layer: 1, .. })));
    }

    #[test]
    fn knob_rewrite() {
        let a = parse_arch(MNIST).unwrap();
        let b = a.with_knob(48, 0.3).unwrap();
        assert_eq!(b.to_string(), "1x28x28-32C5P0-MP2S2-32C5P0-MP2S2-H48-D0.3-H10");
        let c = parse_arch("1x28x28-H12-H10").unwrap().with_knob(16, 0.0).unwrap();
        assert_eq!(c.to_string(), "1x28x28-H16-D0-H10");
        assert_eq!(parse_arch("1x28x28-H10").unwrap().with_knob(8, 0.0), Err(ArchError::NoKnob));
    }
}
