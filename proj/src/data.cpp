#include "dcl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "dcl/error.hpp"
#include "dcl/rng.hpp"

namespace dcl::data {

namespace {

std::vector<unsigned char> slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Reader {
public:
    Reader(std::vector<unsigned char> bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size())
            throw FormatError(what_ + ": truncated, expected at least " + std::to_string(pos_ + n) + " bytes, got " +
                              std::to_string(bytes_.size()));
    }
    bool at_end() const { return pos_ == bytes_.size(); }
    std::size_t size() const { return bytes_.size(); }
    std::size_t pos() const { return pos_; }

    std::string tag(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(&bytes_[pos_]), n);
        pos_ += n;
        return s;
    }
    std::uint64_t le(std::size_t n) {
        need(n);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += n;
        return v;
    }
    std::uint32_t be32() {
        need(4);
        std::uint32_t v = 0;
        for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_ + i];
        pos_ += 4;
        return v;
    }
    float f32() {
        const auto bits = static_cast<std::uint32_t>(le(4));
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    const unsigned char* raw(std::size_t n) {
        need(n);
        const unsigned char* p = &bytes_[pos_];
        pos_ += n;
        return p;
    }

private:
    std::vector<unsigned char> bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

class Writer {
public:
    void tag(const char* s) { out_.insert(out_.end(), s, s + std::strlen(s)); }
    void le(std::uint64_t v, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f32(float f) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        le(bits, 4);
    }
    void bytes(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }
    void save(const fs::path& path) const {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        std::ofstream o(path, std::ios::binary | std::ios::trunc);
        if (!o) throw FormatError("cannot write " + path.string());
        o.write(out_.data(), static_cast<std::streamsize>(out_.size()));
        if (!o) throw FormatError("write failed for " + path.string());
    }

private:
    std::vector<char> out_;
};

} // namespace

// ---------------------------------------------------------------------------
// Image loaders

ImageDataset load_idx(const fs::path& images, const std::optional<fs::path>& labels) {
    Reader r(slurp(images), images.string());
    const std::uint32_t magic = r.be32();
    if (magic != 0x00000803) throw FormatError(images.string() + ": bad IDX image magic");
    const std::size_t n = r.be32(), h = r.be32(), w = r.be32();
    if (n == 0 || h == 0 || w == 0) throw FormatError(images.string() + ": empty IDX image file");
    const std::size_t expected = 16 + n * h * w;
    if (r.size() != expected)
        throw FormatError(images.string() + ": expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(r.size()));
    ImageDataset ds;
    ds.images = NdArray<float>({n, 1, h, w});
    const unsigned char* px = r.raw(n * h * w);
    for (std::size_t i = 0; i < n * h * w; ++i) ds.images[i] = scale_pixel(px[i]);
    if (labels) {
        Reader l(slurp(*labels), labels->string());
        if (l.be32() != 0x00000801) throw FormatError(labels->string() + ": bad IDX label magic");
        const std::size_t ln = l.be32();
        if (ln != n)
            throw FormatError("label count " + std::to_string(ln) + " does not match image count " + std::to_string(n));
        if (l.size() != 8 + n)
            throw FormatError(labels->string() + ": expected " + std::to_string(8 + n) + " bytes, got " +
                              std::to_string(l.size()));
        const unsigned char* lb = l.raw(n);
        ds.labels.assign(lb, lb + n);
    }
    return ds;
}

ImageDataset load_cifar_bin(const std::vector<fs::path>& files) {
    constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
    std::vector<std::vector<unsigned char>> blobs;
    std::size_t n = 0;
    for (const auto& f : files) {
        auto bytes = slurp(f);
        if (bytes.empty() || bytes.size() % kRecord != 0)
            throw FormatError(f.string() + ": length " + std::to_string(bytes.size()) + " is not a multiple of " +
                              std::to_string(kRecord));
        n += bytes.size() / kRecord;
        blobs.push_back(std::move(bytes));
    }
    if (n == 0) throw FormatError("no CIFAR records given");
    ImageDataset ds;
    ds.images = NdArray<float>({n, 3, 32, 32});
    ds.labels.reserve(n);
    std::size_t row = 0;
    for (const auto& b : blobs)
        for (std::size_t off = 0; off < b.size(); off += kRecord, ++row) {
            ds.labels.push_back(b[off]);
            float* dst = ds.images.data() + row * (kRecord - 1);
            for (std::size_t i = 0; i < kRecord - 1; ++i) dst[i] = scale_pixel(b[off + 1 + i]);
        }
    return ds;
}

ImageDataset center_crop(const ImageDataset& ds, std::size_t height, std::size_t width) {
    const std::size_t n = ds.size(), c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
    if (height > h || width > w)
        throw ShapeError("center_crop: " + std::to_string(height) + "x" + std::to_string(width) + " exceeds " +
                         shape_str(ds.images.shape()));
    const std::size_t top = (h - height) / 2, left = (w - width) / 2;
    ImageDataset out{NdArray<float>({n, c, height, width}), ds.labels, ds.preset};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < height; ++y)
                for (std::size_t x = 0; x < width; ++x) out.images(i, ch, y, x) = ds.images(i, ch, y + top, x + left);
    return out;
}

ImageDataset area_downsample(const ImageDataset& ds, std::size_t factor) {
    const std::size_t h = ds.images.dim(2), w = ds.images.dim(3);
    if (factor == 0 || h % factor != 0 || w % factor != 0)
        throw ShapeError("area_downsample: factor " + std::to_string(factor) + " does not divide " +
                         shape_str(ds.images.shape()));
    return area_resize(ds, h / factor, w / factor);
}

ImageDataset area_resize(const ImageDataset& ds, std::size_t height, std::size_t width) {
    const std::size_t n = ds.size(), c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
    if (height == 0 || width == 0 || height > h || width > w)
        throw ShapeError("area_resize: target " + std::to_string(height) + "x" + std::to_string(width) +
                         " invalid for " + shape_str(ds.images.shape()));
    // Per output index: list of (source index, coverage weight).
    auto weights = [](std::size_t in, std::size_t out) {
        std::vector<std::vector<std::pair<std::size_t, double>>> table(out);
        const double step = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t o = 0; o < out; ++o) {
            const double lo = o * step, hi = (o + 1) * step;
            for (auto s = static_cast<std::size_t>(lo); s < in && static_cast<double>(s) < hi; ++s) {
                const double cover = std::min(hi, s + 1.0) - std::max(lo, static_cast<double>(s));
                if (cover > 1e-12) table[o].emplace_back(s, cover / step);
            }
        }
        return table;
    };
    const auto wy = weights(h, height), wx = weights(w, width);
    ImageDataset out{NdArray<float>({n, c, height, width}), ds.labels, ds.preset};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < height; ++y)
                for (std::size_t x = 0; x < width; ++x) {
                    double acc = 0;
                    for (const auto& [sy, ay] : wy[y])
                        for (const auto& [sx, ax] : wx[x]) acc += ay * ax * ds.images(i, ch, sy, sx);
                    out.images(i, ch, y, x) = static_cast<float>(acc);
                }
    return out;
}

ImageDataset subset(const ImageDataset& ds, const std::vector<std::size_t>& rows) {
    if (rows.empty()) throw ShapeError("subset: no rows selected");
    const Shape s = ds.sample_shape();
    const std::size_t stride = shape_numel(s);
    ImageDataset out{NdArray<float>({rows.size(), s[0], s[1], s[2]}), {}, ds.preset};
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= ds.size()) throw ShapeError("subset: row index out of range");
        std::copy_n(ds.images.data() + rows[i] * stride, stride, out.images.data() + i * stride);
        if (!ds.labels.empty()) out.labels.push_back(ds.labels[rows[i]]);
    }
    return out;
}

ImageDataset load_mnist_mini(const fs::path& dir) {
    ImageDataset ds = area_downsample(load_idx(dir / "images-idx3-ubyte", dir / "labels-idx1-ubyte"), 2);
    ds.preset = "mnist-mini";
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic mixtures

void SynthSpec::validate() const {
    if (n == 0) throw ConfigError("synthetic data needs N >= 1");
    if (k < 2) throw ConfigError("synthetic data needs k >= 2 components");
    if (dim == 0) throw ConfigError("synthetic data needs dim >= 1");
    if (!(stddev > 0)) throw ConfigError("synthetic stddev must be positive");
    if (means.empty() && dim < k) throw ConfigError("simplex means need dim >= k");
    if (!means.empty()) {
        if (means.size() != k) throw ConfigError("synthetic means: expected " + std::to_string(k) + " vectors");
        for (const auto& m : means)
            if (m.size() != dim) throw ConfigError("synthetic means: dimension mismatch");
    }
    if (!weights.empty()) {
        if (weights.size() != k) throw ConfigError("synthetic weights: expected " + std::to_string(k) + " entries");
        double s = 0;
        for (double w : weights) {
            if (!(w > 0)) throw ConfigError("synthetic weights must be positive");
            s += w;
        }
        if (std::abs(s - 1.0) > 1e-6) throw ConfigError("synthetic weights must sum to 1");
    }
}

std::vector<std::vector<double>> simplex_means(std::size_t k, std::size_t dim, double distance) {
    if (dim < k) throw ConfigError("simplex_means needs dim >= k");
    std::vector<std::vector<double>> means(k, std::vector<double>(dim, 0.0));
    const double s = distance / std::sqrt(2.0);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) means[i][j] = s * ((i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(k));
    return means;
}

LabeledFeatures synth_gaussians(const SynthSpec& spec) {
    spec.validate();
    const auto means = spec.means.empty() ? simplex_means(spec.k, spec.dim, spec.separation * spec.stddev) : spec.means;
    std::vector<double> weights = spec.weights.empty() ? std::vector<double>(spec.k, 1.0 / spec.k) : spec.weights;
    Rng rng(spec.seed);
    std::discrete_distribution<std::uint32_t> pick(weights.begin(), weights.end());
    std::normal_distribution<double> noise(0.0, spec.stddev);
    LabeledFeatures out;
    out.features.values = NdArray<float>({spec.n, spec.dim});
    out.features.seed = spec.seed;
    out.labels.resize(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const std::uint32_t c = pick(rng);
        out.labels[i] = c;
        for (std::size_t j = 0; j < spec.dim; ++j)
            out.features.values(i, j) = static_cast<float>(means[c][j] + noise(rng));
    }
    return out;
}

SynthSpec gauss3_spec(std::uint64_t seed) {
    SynthSpec s;
    s.seed = seed;
    return s;
}

// ---------------------------------------------------------------------------
// Codecs

void write_features(const fs::path& path, const FeatureMatrix& m) {
    Writer w;
    w.tag("DCFM");
    w.le(kFeatureVersion, 4);
    w.le(m.rows(), 4);
    w.le(m.cols(), 4);
    w.f32(m.dropout_rate);
    w.le(m.seed, 8);
    for (float v : m.values.values()) w.f32(v);
    w.save(path);
}

FeatureMatrix read_features(const fs::path& path) {
    Reader r(slurp(path), path.string());
    if (r.tag(4) != "DCFM") throw FormatError(path.string() + ": bad feature file magic");
    const auto version = r.le(4);
    if (version != kFeatureVersion) throw FormatError(path.string() + ": unsupported feature version " + std::to_string(version));
    const std::size_t n = r.le(4), d = r.le(4);
    FeatureMatrix m;
    m.dropout_rate = r.f32();
    m.seed = r.le(8);
    if (n == 0 || d == 0) throw FormatError(path.string() + ": empty feature matrix");
    const std::size_t expected = r.pos() + n * d * 4;
    if (r.size() != expected)
        throw FormatError(path.string() + ": expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(r.size()));
    m.values = NdArray<float>({n, d});
    for (auto& v : m.values.values()) v = r.f32();
    if (!m.values.all_finite()) throw FormatError(path.string() + ": non-finite feature values");
    return m;
}

void write_labels(const fs::path& path, const std::vector<std::uint32_t>& labels) {
    Writer w;
    w.tag("DCLB");
    w.le(labels.size(), 4);
    for (auto l : labels) w.le(l, 4);
    w.save(path);
}

std::vector<std::uint32_t> read_labels(const fs::path& path) {
    Reader r(slurp(path), path.string());
    if (r.tag(4) != "DCLB") throw FormatError(path.string() + ": bad label file magic");
    const std::size_t n = r.le(4);
    if (r.size() != 8 + 4 * n)
        throw FormatError(path.string() + ": expected " + std::to_string(8 + 4 * n) + " bytes, got " +
                          std::to_string(r.size()));
    std::vector<std::uint32_t> out(n);
    for (auto& l : out) l = static_cast<std::uint32_t>(r.le(4));
    return out;
}

void write_checkpoint(const fs::path& path, const NamedArrays& blobs) {
    Writer w;
    w.tag("DCGK");
    w.le(kCheckpointVersion, 4);
    for (const auto& [name, arr] : blobs) {
        if (name.size() > 0xffff) throw FormatError("checkpoint blob name too long");
        if (arr.rank() > 0xff) throw FormatError("checkpoint blob rank too large");
        w.le(name.size(), 2);
        w.bytes(name);
        w.le(arr.rank(), 1);
        for (std::size_t e : arr.shape()) w.le(e, 4);
        for (float v : arr.values()) w.f32(v);
    }
    w.save(path);
}

NamedArrays read_checkpoint(const fs::path& path) {
    Reader r(slurp(path), path.string());
    if (r.tag(4) != "DCGK") throw FormatError(path.string() + ": bad checkpoint magic");
    const auto version = r.le(4);
    if (version != kCheckpointVersion)
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    NamedArrays out;
    while (!r.at_end()) {
        const std::size_t len = r.le(2);
        std::string name = r.tag(len);
        const std::size_t rank = r.le(1);
        if (rank == 0) throw FormatError(path.string() + ": blob '" + name + "' has rank 0");
        Shape shape(rank);
        for (auto& e : shape) e = r.le(4);
        if (shape_numel(shape) == 0) throw FormatError(path.string() + ": blob '" + name + "' is empty");
        NdArray<float> arr(shape);
        r.need(arr.size() * 4);
        for (auto& v : arr.values()) v = r.f32();
        out.emplace_back(std::move(name), std::move(arr));
    }
    return out;
}

} // namespace dcl::data
