#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "adf/tensor.hpp"

namespace adf {

enum class Label { flawless, anomalous };

struct Sample {
    std::string id;
    Tensor image;  // [3,H,W], values in [0,1]
    Label label = Label::flawless;
    std::optional<std::string> anomaly_type;
};

struct LabeledPath {
    std::filesystem::path path;
    std::string anomaly_type;  // subfolder name, "good" for flawless files
};

/// MVTec-style tree: {root}/{category}/train/good, test/good, test/<defect>.
struct DatasetLayout {
    std::filesystem::path root;
    std::string category;
    std::vector<std::filesystem::path> train_flawless;
    std::vector<std::filesystem::path> test_flawless;
    std::vector<LabeledPath> test_anomalous;

    std::filesystem::path category_dir() const { return root / category; }
    /// Test files with labels; ids are "<subfolder>/<stem>".
    std::vector<Sample> load_test() const;
    std::vector<Sample> load_train() const;
};

/// Image-like file extensions understood by decode_image.
bool is_image_file(const std::filesystem::path& path);

/// .ppm (P6), .pgm (P5, replicated to three channels) or .adtn. The id is
/// the file stem and the label is left flawless; loaders set it.
Sample decode_image(const std::filesystem::path& path);
Tensor decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& context);

/// Values are clamped to [0,1] and rounded to the nearest byte.
std::vector<std::uint8_t> encode_ppm(const Tensor& image);
std::vector<std::uint8_t> encode_pgm(const Tensor& gray);  // [H,W] or [1,H,W]
void write_ppm(const Tensor& image, const std::filesystem::path& path);

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& context);
void write_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

/// Image files directly under `dir`, sorted by file name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);
DatasetLayout load_dataset(const std::filesystem::path& root, const std::string& category);

// Synthetic textures -------------------------------------------------------

inline constexpr std::size_t synth_size = 64;
inline constexpr const char* synth_category = "synthetic";

/// One synthetic image together with the flawless base it was built from and
/// the defect footprint (1 where the defect may change a pixel, H*W).
struct SynthImage {
    Tensor base;
    Tensor image;
    std::vector<std::uint8_t> mask;
    std::string defect_type;  // "good", "scratch" or "blob"
};

enum class SynthSplit { train, test_good, test_defect };

/// Regenerates image `index` of `split` for the dataset seeded by `seed`
/// exactly as synth_dataset writes it (values are byte-quantized).
SynthImage synth_image(std::uint64_t seed, SynthSplit split, std::size_t index);

/// Writes {out_root}/synthetic/... and returns the loaded layout.
DatasetLayout synth_dataset(const std::filesystem::path& out_root, std::size_t n_train, std::size_t n_test_good,
                            std::size_t n_test_defect, std::uint64_t seed);

/// File name (without directory) used for image `index` of a split.
std::string synth_file_name(std::size_t index, std::size_t count);

}  // namespace adf
