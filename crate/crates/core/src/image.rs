//! Interleaved 8-bit images (row-major, `H × W × C`).

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub shape: ImageShape,
    #[serde(with = "pixels_b64")]
    pub data: Vec<u8>,
}

// Pixel buffers travel as base64 in JSON payloads.
mod pixels_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(data))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<u8>) -> Self {
        assert_eq!(shape.len(), data.len(), "pixel buffer does not match shape");
        Self { shape, data }
    }

    pub fn view(&self) -> ImageRef<'_> {
        ImageRef {
            shape: self.shape,
            data: &self.data,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ImageRef<'a> {
    pub shape: ImageShape,
    pub data: &'a [u8],
}

impl ImageRef<'_> {
    pub fn to_owned(&self) -> Image {
        Image::new(self.shape, self.data.to_vec())
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.shape.width + x) * self.shape.channels + c]
    }
}

/// A contiguous block of equally shaped images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSet {
    shape: ImageShape,
    pixels: Vec<u8>,
}

impl ImageSet {
    pub fn new(shape: ImageShape, pixels: Vec<u8>) -> Self {
        assert!(!shape.is_empty(), "image shape must be non-empty");
        assert_eq!(pixels.len() % shape.len(), 0, "ragged pixel buffer");
        Self { shape, pixels }
    }

    pub fn from_images(shape: ImageShape, images: impl IntoIterator<Item = Image>) -> Self {
        let mut pixels = Vec::new();
        for img in images {
            assert_eq!(img.shape, shape);
            pixels.extend_from_slice(&img.data);
        }
        Self::new(shape, pixels)
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, i: usize) -> ImageRef<'_> {
        let n = self.shape.len();
        ImageRef {
            shape: self.shape,
            data: &self.pixels[i * n..(i + 1) * n],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ImageRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}
