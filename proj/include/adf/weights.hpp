#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "adf/tensor.hpp"

// "ADWT" weight files:
//   magic "ADWT", u8 version = 1, u32 record count, then per record
//   u16 name length, UTF-8 name, u8 dtype, u32 ndim, u32 dims[ndim], payload.
// dtype 0 is f32 little-endian, dtype 1 is u32 little-endian (index arrays).

namespace adf {

enum class WeightDtype : std::uint8_t { f32 = 0, u32 = 1 };

struct WeightRecord {
    std::string name;
    WeightDtype dtype = WeightDtype::f32;
    Shape dims;
    std::vector<float> f32;
    std::vector<std::uint32_t> u32;

    static WeightRecord from_tensor(std::string name, const Tensor& t);
    static WeightRecord from_indices(std::string name, const std::vector<std::uint32_t>& idx);
    std::size_t count() const;
};

std::vector<std::uint8_t> encode_weights(const std::vector<WeightRecord>& records);
std::vector<WeightRecord> decode_weights(const std::vector<std::uint8_t>& bytes);

void write_weight_file(const std::filesystem::path& path, const std::vector<WeightRecord>& records);
std::vector<WeightRecord> read_weight_file(const std::filesystem::path& path);

/// Finds a record by name; nullptr when absent.
const WeightRecord* find_record(const std::vector<WeightRecord>& records, const std::string& name);

}  // namespace adf
