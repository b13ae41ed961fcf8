#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace adf {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned storage. Vectorized kernels peel a number of leading
/// elements that depends on the address, which changes the summation order;
/// a fixed alignment keeps results independent of where the heap puts data.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using FloatStorage = std::vector<float, AlignedAllocator<float>>;

std::string to_string(const Shape& shape);

/// Dense row-major float32 array. The shape is fixed at construction;
/// every entry of the shape is positive.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    static Tensor vector(std::initializer_list<float> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    float& at(std::size_t c, std::size_t h, std::size_t w) {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }
    float at(std::size_t c, std::size_t h, std::size_t w) const {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }

    void fill(float value);
    /// Same data under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    FloatStorage data_;
};

std::size_t element_count(const Shape& shape);

/// Throws DimensionError naming both shapes when they differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);
void require_rank(const Tensor& t, std::size_t rank, const char* what);

/// True when both tensors have identical shapes and identical bit patterns.
bool bitwise_equal(const Tensor& a, const Tensor& b);

float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace adf
