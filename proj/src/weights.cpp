#include "adf/weights.hpp"

#include <algorithm>
#include <limits>

#include "adf/binary_io.hpp"
#include "adf/errors.hpp"

namespace adf {

namespace {
constexpr std::string_view kMagic = "ADWT";
constexpr std::uint8_t kVersion = 1;
}  // namespace

WeightRecord WeightRecord::from_tensor(std::string name, const Tensor& t) {
    WeightRecord r;
    r.name = std::move(name);
    r.dtype = WeightDtype::f32;
    r.dims = t.shape();
    r.f32.assign(t.values().begin(), t.values().end());
    return r;
}

WeightRecord WeightRecord::from_indices(std::string name, const std::vector<std::uint32_t>& idx) {
    WeightRecord r;
    r.name = std::move(name);
    r.dtype = WeightDtype::u32;
    r.dims = {idx.size()};
    r.u32 = idx;
    return r;
}

std::size_t WeightRecord::count() const { return dtype == WeightDtype::f32 ? f32.size() : u32.size(); }

std::vector<std::uint8_t> encode_weights(const std::vector<WeightRecord>& records) {
    ByteWriter w;
    w.raw(kMagic);
    w.u8(kVersion);
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        if (r.name.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw FormatError("weight record name too long: " + r.name.substr(0, 64) + "...");
        }
        if (element_count(r.dims) != r.count()) {
            throw DimensionError("weight record '" + r.name + "': dims " + to_string(r.dims) + " vs " +
                                 std::to_string(r.count()) + " values");
        }
        w.u16(static_cast<std::uint16_t>(r.name.size()));
        w.raw(r.name);
        w.u8(static_cast<std::uint8_t>(r.dtype));
        w.u32(static_cast<std::uint32_t>(r.dims.size()));
        for (auto d : r.dims) w.u32(static_cast<std::uint32_t>(d));
        if (r.dtype == WeightDtype::f32) {
            for (float v : r.f32) w.f32(v);
        } else {
            for (auto v : r.u32) w.u32(v);
        }
    }
    return w.take();
}

std::vector<WeightRecord> decode_weights(const std::vector<std::uint8_t>& bytes) {
    ByteReader in(bytes, "weight file");
    if (in.str(4) != kMagic) throw FormatError("weight file: bad magic (expected ADWT)");
    const auto version = in.u8();
    if (version != kVersion) throw FormatError("weight file: unsupported version " + std::to_string(version));
    const std::uint32_t n = in.u32();
    std::vector<WeightRecord> records;
    records.reserve(std::min<std::uint32_t>(n, 4096));
    for (std::uint32_t i = 0; i < n; ++i) {
        WeightRecord r;
        const std::string where = "weight record " + std::to_string(i);
        try {
            r.name = in.str(in.u16());
            const auto dtype = in.u8();
            if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype));
            r.dtype = static_cast<WeightDtype>(dtype);
            const std::uint32_t ndim = in.u32();
            in.need(static_cast<std::size_t>(ndim) * 4);
            std::size_t total = 1;
            for (std::uint32_t d = 0; d < ndim; ++d) {
                const std::uint32_t extent = in.u32();
                if (extent == 0) throw FormatError("zero dimension");
                r.dims.push_back(extent);
                total *= extent;
                if (total > in.remaining() / 4) in.need(in.remaining() + 1);
            }
            in.need(total * 4);
            if (r.dtype == WeightDtype::f32) {
                r.f32.resize(total);
                for (auto& v : r.f32) v = in.f32();
            } else {
                r.u32.resize(total);
                for (auto& v : r.u32) v = in.u32();
            }
        } catch (const FormatError& e) {
            throw FormatError(where + (r.name.empty() ? "" : " ('" + r.name + "')") + ": " + e.what());
        }
        records.push_back(std::move(r));
    }
    if (in.remaining() != 0) {
        throw FormatError("weight file: " + std::to_string(in.remaining()) + " trailing bytes after last record");
    }
    return records;
}

void write_weight_file(const std::filesystem::path& path, const std::vector<WeightRecord>& records) {
    write_file_atomic(path, encode_weights(records));
}

std::vector<WeightRecord> read_weight_file(const std::filesystem::path& path) {
    return decode_weights(read_file_bytes(path));
}

const WeightRecord* find_record(const std::vector<WeightRecord>& records, const std::string& name) {
    auto it = std::find_if(records.begin(), records.end(), [&](const WeightRecord& r) { return r.name == name; });
    return it == records.end() ? nullptr : &*it;
}

}  // namespace adf
