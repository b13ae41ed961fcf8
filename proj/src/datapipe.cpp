#include "adf/datapipe.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include "adf/binary_io.hpp"
#include "adf/errors.hpp"
#include "adf/parallel.hpp"
#include "adf/random.hpp"

namespace fs = std::filesystem;

namespace adf {

namespace {

std::string lower_ext(const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return e;
}

std::uint8_t to_byte(float v) {
    const float c = std::clamp(std::isnan(v) ? 0.0f : v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// PNM header tokenizer: whitespace separated integers, '#' comments.
class PnmHeader {
public:
    PnmHeader(const std::vector<std::uint8_t>& b, const std::string& ctx) : b_(b), ctx_(ctx) {}

    std::size_t number(const char* what) {
        skip();
        std::size_t v = 0;
        std::size_t digits = 0;
        while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
            v = v * 10 + (b_[pos_++] - '0');
            if (++digits > 9) throw FormatError(ctx_ + ": " + what + " is too large");
        }
        if (digits == 0) throw FormatError(ctx_ + ": expected " + std::string(what) + " in header");
        return v;
    }
    /// Consumes the single whitespace byte that ends the header.
    std::size_t payload_start() {
        if (pos_ >= b_.size() || !std::isspace(b_[pos_])) throw FormatError(ctx_ + ": truncated header");
        return pos_ + 1;
    }
    std::size_t pos_ = 2;

private:
    void skip() {
        while (pos_ < b_.size()) {
            if (b_[pos_] == '#') {
                while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
            } else if (std::isspace(b_[pos_])) {
                ++pos_;
            } else {
                break;
            }
        }
    }
    const std::vector<std::uint8_t>& b_;
    const std::string& ctx_;
};

Tensor image_from_tensor(Tensor t, const std::string& ctx) {
    if (t.rank() == 2) t = t.reshaped({1, t.dim(0), t.dim(1)});
    if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3)) {
        throw FormatError(ctx + ": image tensor must be [3,H,W], [1,H,W] or [H,W], got " + to_string(t.shape()));
    }
    for (float v : t.values()) {
        if (!(v >= 0.0f && v <= 1.0f)) throw FormatError(ctx + ": image values must lie in [0,1]");
    }
    if (t.dim(0) == 3) return t;
    const std::size_t hw = t.dim(1) * t.dim(2);
    Tensor rgb({3, t.dim(1), t.dim(2)});
    for (std::size_t c = 0; c < 3; ++c) std::copy_n(t.data(), hw, rgb.data() + c * hw);
    return rgb;
}

std::vector<Sample> load_list(const std::vector<fs::path>& paths, const std::string& folder, Label label) {
    std::vector<Sample> out;
    out.reserve(paths.size());
    for (const auto& p : paths) {
        Sample s = decode_image(p);
        s.id = folder + "/" + p.stem().string();
        s.label = label;
        if (label == Label::anomalous) s.anomaly_type = folder;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

bool is_image_file(const fs::path& path) {
    const std::string e = lower_ext(path);
    return e == ".ppm" || e == ".pgm" || e == ".adtn";
}

Tensor decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& context) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
        throw FormatError(context + ": bad magic (expected P6 or P5)");
    }
    const bool color = bytes[1] == '6';
    PnmHeader h(bytes, context);
    const std::size_t width = h.number("width");
    const std::size_t height = h.number("height");
    const std::size_t maxval = h.number("maxval");
    if (width == 0 || height == 0) throw FormatError(context + ": zero image extent");
    if (maxval != 255) throw FormatError(context + ": maxval " + std::to_string(maxval) + " unsupported (expected 255)");
    const std::size_t start = h.payload_start();
    const std::size_t channels = color ? 3 : 1;
    const std::size_t need = width * height * channels;
    if (bytes.size() - start < need) {
        throw FormatError(context + ": truncated pixel data (need " + std::to_string(need) + " bytes, have " +
                          std::to_string(bytes.size() - start) + ")");
    }
    Tensor img({3, height, width});
    const std::size_t hw = width * height;
    for (std::size_t i = 0; i < hw; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const std::uint8_t b = bytes[start + i * channels + (color ? c : 0)];
            img[c * hw + i] = static_cast<float>(b) / 255.0f;
        }
    }
    return img;
}

Sample decode_image(const fs::path& path) {
    const std::string e = lower_ext(path);
    const std::string ctx = path.string();
    Sample s;
    s.id = path.stem().string();
    if (e == ".ppm" || e == ".pgm") {
        s.image = decode_ppm(read_file_bytes(path), ctx);
    } else if (e == ".adtn") {
        s.image = image_from_tensor(read_tensor(path), ctx);
    } else {
        throw FormatError(ctx + ": unsupported image extension '" + path.extension().string() + "'");
    }
    return s;
}

std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
    require_rank(image, 3, "encode_ppm");
    if (image.dim(0) != 3) throw DimensionError("encode_ppm: expected 3 channels, got " + to_string(image.shape()));
    const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
    const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(header.size() + 3 * hw);
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t c = 0; c < 3; ++c) out.push_back(to_byte(image[c * hw + i]));
    return out;
}

std::vector<std::uint8_t> encode_pgm(const Tensor& gray) {
    if (!(gray.rank() == 2 || (gray.rank() == 3 && gray.dim(0) == 1))) {
        throw DimensionError("encode_pgm: expected [H,W] or [1,H,W], got " + to_string(gray.shape()));
    }
    const std::size_t h = gray.dim(gray.rank() - 2), w = gray.dim(gray.rank() - 1);
    const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (float v : gray.values()) out.push_back(to_byte(v));
    return out;
}

void write_ppm(const Tensor& image, const fs::path& path) { write_file_atomic(path, encode_ppm(image)); }

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    ByteWriter w;
    w.raw("ADTN");
    w.u8(1);
    w.u8(0);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values()) w.f32(v);
    return w.take();
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& context) {
    ByteReader r(bytes, context);
    if (r.str(4) != "ADTN") throw FormatError(context + ": bad magic (expected ADTN)");
    const std::uint8_t version = r.u8();
    if (version != 1) throw FormatError(context + ": unsupported version " + std::to_string(version));
    const std::uint8_t dtype = r.u8();
    if (dtype != 0) throw FormatError(context + ": unsupported dtype " + std::to_string(dtype));
    const std::uint32_t ndim = r.u32();
    if (ndim == 0 || ndim > 8) throw FormatError(context + ": invalid ndim " + std::to_string(ndim));
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        const std::uint32_t d = r.u32();
        if (d == 0) throw FormatError(context + ": zero extent in dimension " + std::to_string(i));
        count *= d;
        if (count > (std::uint64_t{1} << 34)) throw FormatError(context + ": tensor too large");
        shape.push_back(d);
    }
    if (r.remaining() != count * 4) {
        throw FormatError(context + ": dims give " + std::to_string(count) + " elements (" + std::to_string(count * 4) +
                          " bytes) but payload holds " + std::to_string(r.remaining()) + " bytes");
    }
    Tensor t(shape);
    for (auto& v : t.values()) v = r.f32();
    return t;
}

void write_tensor(const Tensor& t, const fs::path& path) { write_file_atomic(path, encode_tensor(t)); }

Tensor read_tensor(const fs::path& path) { return decode_tensor(read_file_bytes(path), path.string()); }

std::vector<fs::path> list_images(const fs::path& dir) {
    std::vector<fs::path> out;
    std::error_code ec;
    for (fs::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec)) {
        if (it->is_regular_file() && is_image_file(it->path())) out.push_back(it->path());
    }
    if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
    std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
        return a.filename().string() < b.filename().string();
    });
    return out;
}

DatasetLayout load_dataset(const fs::path& root, const std::string& category) {
    DatasetLayout d;
    d.root = root;
    d.category = category;
    const fs::path cat = root / category;
    const fs::path train = cat / "train" / "good";
    if (!fs::is_directory(train)) throw LayoutError("dataset: missing directory " + train.string());
    d.train_flawless = list_images(train);
    if (d.train_flawless.empty()) throw LayoutError("dataset: no images in " + train.string());
    const fs::path test = cat / "test";
    if (!fs::is_directory(test)) throw LayoutError("dataset: missing directory " + test.string());

    std::vector<std::string> folders;
    for (const auto& e : fs::directory_iterator(test)) {
        if (e.is_directory()) folders.push_back(e.path().filename().string());
    }
    std::sort(folders.begin(), folders.end());
    for (const auto& f : folders) {
        for (auto& p : list_images(test / f)) {
            if (f == "good") {
                d.test_flawless.push_back(std::move(p));
            } else {
                d.test_anomalous.push_back(LabeledPath{std::move(p), f});
            }
        }
    }
    if (d.test_flawless.empty() && d.test_anomalous.empty()) {
        throw LayoutError("dataset: no test images under " + test.string());
    }
    return d;
}

std::vector<Sample> DatasetLayout::load_train() const { return load_list(train_flawless, "good", Label::flawless); }

std::vector<Sample> DatasetLayout::load_test() const {
    std::vector<Sample> out = load_list(test_flawless, "good", Label::flawless);
    for (const auto& lp : test_anomalous) {
        auto one = load_list({lp.path}, lp.anomaly_type, Label::anomalous);
        out.push_back(std::move(one.front()));
    }
    std::sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
    return out;
}

// Synthetic textures -------------------------------------------------------

namespace {

struct Grating {
    double fx, fy, amplitude;
};

struct Texture {
    Grating gratings[4];
    double tint[3];
};

Texture texture_for(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x7E7));
    Texture t{};
    for (auto& g : t.gratings) {
        const double freq = rng.uniform(0.03, 0.12);  // cycles per pixel
        const double angle = rng.uniform(0.0, std::numbers::pi);
        g = Grating{freq * std::cos(angle), freq * std::sin(angle), rng.uniform(0.04, 0.08)};
    }
    for (double& c : t.tint) c = rng.uniform(0.8, 1.0);
    return t;
}

// Unquantized flawless texture: four gratings with per-image phases plus
// uniform white noise of amplitude 0.05.
Tensor raw_base(const Texture& tex, Rng& rng) {
    constexpr std::size_t n = synth_size;
    double phase[4];
    for (double& p : phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);
    Tensor img({3, n, n});
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            double v = 0.5;
            for (int k = 0; k < 4; ++k) {
                const Grating& g = tex.gratings[k];
                v += g.amplitude * std::sin(2.0 * std::numbers::pi * (g.fx * x + g.fy * y) + phase[k]);
            }
            for (std::size_t c = 0; c < 3; ++c) {
                const double noisy = v * tex.tint[c] + rng.uniform(-0.05, 0.05);
                img.at(c, y, x) = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
            }
        }
    return img;
}

Tensor quantized(const Tensor& t) {
    Tensor q(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) q[i] = static_cast<float>(to_byte(t[i])) / 255.0f;
    return q;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double t = std::clamp(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0);
    return std::hypot(px - (ax + t * dx), py - (ay + t * dy));
}

// Dark anti-aliased line: coverage c = clamp(w/2 + 0.5 - d), pixel *= 1 - 0.7c.
void add_scratch(Tensor& img, std::vector<std::uint8_t>& mask, Rng& rng) {
    constexpr double n = synth_size;
    const double width = rng.uniform(1.0, 2.0);
    const double length = rng.uniform(15.0, 40.0);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double cx = rng.uniform(12.0, n - 12.0), cy = rng.uniform(12.0, n - 12.0);
    const double ax = cx - 0.5 * length * std::cos(angle), ay = cy - 0.5 * length * std::sin(angle);
    const double bx = cx + 0.5 * length * std::cos(angle), by = cy + 0.5 * length * std::sin(angle);
    const std::size_t hw = synth_size * synth_size;
    for (std::size_t y = 0; y < synth_size; ++y)
        for (std::size_t x = 0; x < synth_size; ++x) {
            const double d = segment_distance(static_cast<double>(x), static_cast<double>(y), ax, ay, bx, by);
            const double cover = std::clamp(width / 2 + 0.5 - d, 0.0, 1.0);
            if (cover <= 0.0) continue;
            mask[y * synth_size + x] = 1;
            for (std::size_t c = 0; c < 3; ++c) {
                float& v = img[c * hw + y * synth_size + x];
                v = static_cast<float>(v * (1.0 - 0.7 * cover));
            }
        }
}

// Bright Gaussian bump of amplitude 0.4, truncated where it is below half a
// quantization step.
void add_blob(Tensor& img, std::vector<std::uint8_t>& mask, Rng& rng) {
    constexpr double n = synth_size;
    const double sigma = rng.uniform(3.0, 6.0);
    const double cx = rng.uniform(8.0, n - 8.0), cy = rng.uniform(8.0, n - 8.0);
    const std::size_t hw = synth_size * synth_size;
    for (std::size_t y = 0; y < synth_size; ++y)
        for (std::size_t x = 0; x < synth_size; ++x) {
            const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            const double bump = 0.4 * std::exp(-r2 / (2.0 * sigma * sigma));
            if (bump < 0.5 / 255.0) continue;
            mask[y * synth_size + x] = 1;
            for (std::size_t c = 0; c < 3; ++c) {
                float& v = img[c * hw + y * synth_size + x];
                v = static_cast<float>(std::min(1.0, v + bump));
            }
        }
}

std::size_t changed_pixels(const Tensor& a, const Tensor& b) {
    const std::size_t hw = synth_size * synth_size;
    std::size_t count = 0;
    for (std::size_t i = 0; i < hw; ++i) {
        float d = 0.0f;
        for (std::size_t c = 0; c < 3; ++c) d = std::max(d, std::abs(a[c * hw + i] - b[c * hw + i]));
        if (d >= 0.1f) ++count;
    }
    return count;
}

const char* split_dir(SynthSplit split, std::size_t index) {
    switch (split) {
        case SynthSplit::train: return "train/good";
        case SynthSplit::test_good: return "test/good";
        case SynthSplit::test_defect: return index % 2 == 0 ? "test/scratch" : "test/blob";
    }
    return "";
}

}  // namespace

SynthImage synth_image(std::uint64_t seed, SynthSplit split, std::size_t index) {
    const Texture tex = texture_for(seed);
    Rng rng(derive_seed(seed, 1 + static_cast<std::uint64_t>(split), index));
    const Tensor raw = raw_base(tex, rng);
    SynthImage out;
    out.base = quantized(raw);
    out.mask.assign(synth_size * synth_size, 0);
    if (split != SynthSplit::test_defect) {
        out.image = out.base;
        out.defect_type = "good";
        return out;
    }
    out.defect_type = index % 2 == 0 ? "scratch" : "blob";
    Rng drng(derive_seed(seed, 0xDEF, index));
    for (;;) {
        Tensor img = raw;
        std::fill(out.mask.begin(), out.mask.end(), 0);
        if (index % 2 == 0) {
            add_scratch(img, out.mask, drng);
        } else {
            add_blob(img, out.mask, drng);
        }
        out.image = quantized(img);
        if (changed_pixels(out.image, out.base) >= 10) break;
    }
    return out;
}

std::string synth_file_name(std::size_t index, std::size_t count) {
    std::size_t width = 3;
    for (std::size_t n = count > 0 ? count - 1 : 0; n >= 1000; n /= 10) ++width;
    std::string s = std::to_string(index);
    return std::string(width > s.size() ? width - s.size() : 0, '0') + s + ".ppm";
}

DatasetLayout synth_dataset(const fs::path& out_root, std::size_t n_train, std::size_t n_test_good,
                            std::size_t n_test_defect, std::uint64_t seed) {
    if (n_train == 0 || n_test_good == 0 || n_test_defect == 0) {
        throw ConfigError("synth: image counts must be at least 1");
    }
    const fs::path cat = out_root / synth_category;
    std::error_code ec;
    for (const char* sub : {"train/good", "test/good", "test/scratch", "test/blob"}) {
        if (std::string(sub) == "test/blob" && n_test_defect < 2) continue;
        fs::create_directories(cat / sub, ec);
        if (ec) throw IoError("synth: cannot create " + (cat / sub).string() + ": " + ec.message());
    }
    struct Job {
        SynthSplit split;
        std::size_t index, count;
    };
    std::vector<Job> jobs;
    for (std::size_t i = 0; i < n_train; ++i) jobs.push_back({SynthSplit::train, i, n_train});
    for (std::size_t i = 0; i < n_test_good; ++i) jobs.push_back({SynthSplit::test_good, i, n_test_good});
    for (std::size_t i = 0; i < n_test_defect; ++i) jobs.push_back({SynthSplit::test_defect, i, n_test_defect});
    parallel_for(jobs.size(), [&](std::size_t j) {
        const Job& job = jobs[j];
        const SynthImage img = synth_image(seed, job.split, job.index);
        write_ppm(img.image, cat / split_dir(job.split, job.index) / synth_file_name(job.index, job.count));
    });
    return load_dataset(out_root, synth_category);
}

}  // namespace adf
