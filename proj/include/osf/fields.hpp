#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "osf/geom.hpp"

namespace osf {

/// Sin/cos frequency encoding: [x?, sin(2^0 x), cos(2^0 x), ..., sin(2^{L-1} x), cos(2^{L-1} x)],
/// interleaved per coordinate within each band.
struct PositionalEncoding {
    int num_frequencies = 0;
    bool include_input = true;

    int output_dim(int input_dim) const {
        return input_dim * ((include_input ? 1 : 0) + 2 * num_frequencies);
    }
    void encode(std::span<const double> x, std::span<double> out) const;
    /// Also emits d(out[i])/d(x[source_coord(i)]); the encoding has exactly one
    /// nonzero partial per output component.
    void encode_with_derivative(std::span<const double> x, std::span<double> out,
                                std::span<double> deriv) const;
    int source_coord(int out_index, int input_dim) const;
};

std::vector<double> encode(const PositionalEncoding& pe, std::span<const double> x);

struct FieldConfig {
    int pe_position = 6;
    int pe_direction = 4;
    int geo_hidden_layers = 4;
    int geo_width = 128;
    int geo_feature_dim = 64;
    int app_hidden_layers = 2;
    int app_width = 128;
    int feature_dim = 256;  // hidden feature size; also the decoder width
    double softplus_beta = 100.0;
    double init_radius = 0.0;  // <= 0: resolved from the scene bounds at training time
    double init_alpha = 10.0;  // density scale at initialization
    double init_beta = 0.1;    // Laplace spread at initialization; anneals by training

    int pos_enc_dim() const { return 3 * (1 + 2 * pe_position); }
    int dir_enc_dim() const { return 3 * (1 + 2 * pe_direction); }
    int app_input_dim() const { return dir_enc_dim() + 3 + 3 + geo_feature_dim; }
    bool operator==(const FieldConfig&) const = default;
};

/// All trainable parameters in one flat array. Offsets are derived from the
/// config; gradients use a plain vector of the same length.
class FieldParams {
public:
    FieldConfig config;
    Vec3 input_center{0, 0, 0};  // network inputs are world points minus this
    std::vector<double> data;

    static FieldParams create(const FieldConfig& config, const Vec3& input_center);

    /// Sphere initialization: the initial SDF approximates |x - center| - init_radius,
    /// the occupancy head starts consistent with the SDF sign, appearance and
    /// decoder heads start near mid-gray.
    void initialize(uint64_t seed);

    size_t size() const { return data.size(); }

    // Geometry trunk layer l (0-based): weight is out x in row-major.
    size_t geo_w(int l) const { return geo_w_[l]; }
    size_t geo_b(int l) const { return geo_b_[l]; }
    int geo_in_dim(int l) const { return l == 0 ? config.pos_enc_dim() : config.geo_width; }
    size_t sdf_head_w() const { return sdf_head_w_; }
    size_t sdf_head_b() const { return sdf_head_b_; }
    size_t occ_head_w() const { return occ_head_w_; }
    size_t occ_head_b() const { return occ_head_b_; }
    size_t feat_head_w() const { return feat_head_w_; }
    size_t feat_head_b() const { return feat_head_b_; }

    size_t app_w(int l) const { return app_w_[l]; }
    size_t app_b(int l) const { return app_b_[l]; }
    int app_in_dim(int l) const { return l == 0 ? config.app_input_dim() : config.app_width; }
    size_t color_head_w() const { return color_head_w_; }
    size_t color_head_b() const { return color_head_b_; }
    size_t feature_head_w() const { return feature_head_w_; }
    size_t feature_head_b() const { return feature_head_b_; }

    size_t dec_w1() const { return dec_w1_; }
    size_t dec_b1() const { return dec_b1_; }
    size_t dec_w2() const { return dec_w2_; }
    size_t dec_b2() const { return dec_b2_; }

    size_t alpha_raw() const { return alpha_raw_; }
    size_t beta_raw() const { return beta_raw_; }

    /// Positive reparameterization: floor + softplus(raw), floor 1e-4.
    double alpha_scale() const;
    double beta_scale() const;
    void set_scales(double alpha, double beta);  // inverts the reparameterization

    uint64_t architecture_hash() const;

private:
    std::vector<size_t> geo_w_, geo_b_, app_w_, app_b_;
    size_t sdf_head_w_ = 0, sdf_head_b_ = 0, occ_head_w_ = 0, occ_head_b_ = 0;
    size_t feat_head_w_ = 0, feat_head_b_ = 0;
    size_t color_head_w_ = 0, color_head_b_ = 0, feature_head_w_ = 0, feature_head_b_ = 0;
    size_t dec_w1_ = 0, dec_b1_ = 0, dec_w2_ = 0, dec_b2_ = 0;
    size_t alpha_raw_ = 0, beta_raw_ = 0;
};

constexpr double kScaleFloor = 1e-4;
double softplus_unit(double x);
double softplus_unit_inverse(double y);
double sigmoid(double x);

/// Reverse-mode step for n = g/|g| (zero when the fallback normal was used).
inline Vec3 normalize_adjoint(const Vec3& g, const Vec3& adj_unit) {
    double r = norm(g);
    if (r <= 1e-12) return {0, 0, 0};
    Vec3 n = g / r;
    return (adj_unit - n * dot(n, adj_unit)) / r;
}

/// Per-point geometry pass with recorded intermediates. forward() must precede
/// backward(); backward() accumulates exact parameter gradients, including the
/// second-order terms that arise when the loss depends on the spatial SDF
/// gradient (eikonal, rendered normals).
class GeometryEval {
public:
    void prepare(const FieldConfig& config);

    void forward(const FieldParams& params, const Vec3& p, bool with_gradient);

    double sdf() const { return sdf_; }
    double occ_logit() const { return occ_logit_; }
    double occ() const { return sigmoid(occ_logit_); }
    const std::vector<double>& geo_feature() const { return feature_; }
    Vec3 sdf_gradient() const { return grad_; }
    /// Normalized gradient; falls back to +z when the gradient vanishes.
    Vec3 normal() const;

    /// adj_feature may be null; adj_grad must be zero unless forward() ran
    /// with with_gradient.
    void backward(const FieldParams& params, double adj_sdf, double adj_occ_logit,
                  const double* adj_feature, const Vec3& adj_grad, std::vector<double>& grad_out);

private:
    FieldConfig config_;
    bool has_forward_ = false;
    bool has_gradient_ = false;

    std::vector<double> enc_, enc_deriv_;
    std::vector<int> enc_src_;
    std::vector<std::vector<double>> z_, a_, sp_, spp_, vchain_, uchain_;
    std::vector<double> vin_;
    std::vector<double> feature_;
    double sdf_ = 0, occ_logit_ = 0;
    Vec3 grad_{0, 0, 0};

    // backward scratch
    std::vector<std::vector<double>> z2bar_;
    std::vector<double> abar_, zhat_, ubar_, vbar_, vin_bar_;
};

/// Per-point appearance pass (view-dependent color + hidden feature).
class AppearanceEval {
public:
    void prepare(const FieldConfig& config);

    void forward(const FieldParams& params, const Vec3& p, const Vec3& view_dir, const Vec3& normal,
                 std::span<const double> geo_feature);

    Vec3 color() const { return color_; }
    const std::vector<double>& hidden_feature() const { return hidden_; }

    /// Emits adjoints for the two geometry-side inputs so the caller can chain
    /// them into GeometryEval::backward.
    void backward(const FieldParams& params, const Vec3& adj_color, const double* adj_hidden,
                  std::vector<double>& grad_out, Vec3& adj_normal_out,
                  std::vector<double>& adj_geo_feature_out);

private:
    FieldConfig config_;
    bool has_forward_ = false;
    std::vector<double> input_;
    std::vector<std::vector<double>> z_, a_;
    std::vector<double> hidden_;
    Vec3 color_{0, 0, 0};
    Vec3 color_logit_{0, 0, 0};
    std::vector<double> abar_, zhat_, input_bar_;
};

/// Single hidden layer decoder: feature -> rgb in (0,1)^3.
class DecoderEval {
public:
    void prepare(const FieldConfig& config);
    void forward(const FieldParams& params, std::span<const double> feature);
    Vec3 color() const { return color_; }
    void backward(const FieldParams& params, const Vec3& adj_color, std::vector<double>& grad_out,
                  std::vector<double>& adj_feature_out);

private:
    FieldConfig config_;
    bool has_forward_ = false;
    std::vector<double> input_, z1_, a1_;
    Vec3 color_{0, 0, 0};
    Vec3 color_logit_{0, 0, 0};
    std::vector<double> a1_bar_;
};

// Convenience wrappers matching the one-shot query style used by tools/tests.
struct GeometrySample {
    double sdf;
    double occ;
    std::vector<double> geo_feature;
};
GeometrySample geometry_forward(const FieldParams& params, const Vec3& p);
Vec3 sdf_spatial_gradient(const FieldParams& params, const Vec3& p);
Vec3 decode_feature(const FieldParams& params, std::span<const double> feature);

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Binary checkpoint: header (magic, version, architecture hash, counts,
/// step) + config + flat parameter block, optionally followed by Adam moments.
void save_checkpoint(const std::string& path, const FieldParams& params, uint64_t step,
                     const std::vector<double>* adam_m = nullptr,
                     const std::vector<double>* adam_v = nullptr);

struct Checkpoint {
    FieldParams params;
    uint64_t step = 0;
    std::optional<std::vector<double>> adam_m;
    std::optional<std::vector<double>> adam_v;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace osf
