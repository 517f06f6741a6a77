#include "osf/fields.hpp"

#include <cassert>
#include <cmath>
#include <cstring>
#include <fstream>

#include "osf/rng.hpp"

namespace osf {

namespace {

// Dense kernels on row-major weights. The 4-way accumulators keep the
// summation order fixed while letting the compiler vectorize.
void matvec(const double* w, const double* x, const double* b, double* out, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        const double* row = w + size_t(i) * cols;
        double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
        int j = 0;
        for (; j + 4 <= cols; j += 4) {
            s0 += row[j] * x[j];
            s1 += row[j + 1] * x[j + 1];
            s2 += row[j + 2] * x[j + 2];
            s3 += row[j + 3] * x[j + 3];
        }
        double s = (s0 + s1) + (s2 + s3);
        for (; j < cols; ++j) s += row[j] * x[j];
        out[i] = s + (b ? b[i] : 0.0);
    }
}

// out[j] = sum_i w[i][j] * x[i]
void matvec_transposed(const double* w, const double* x, double* out, int rows, int cols) {
    std::fill(out, out + cols, 0.0);
    for (int i = 0; i < rows; ++i) {
        double xi = x[i];
        if (xi == 0.0) continue;
        const double* row = w + size_t(i) * cols;
        for (int j = 0; j < cols; ++j) out[j] += xi * row[j];
    }
}

// w[i][j] += u[i] * v[j]
void outer_accumulate(double* w, const double* u, const double* v, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        double ui = u[i];
        if (ui == 0.0) continue;
        double* row = w + size_t(i) * cols;
        for (int j = 0; j < cols; ++j) row[j] += ui * v[j];
    }
}

void axpy(double a, const double* x, double* y, int n) {
    if (a == 0.0) return;
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

struct SoftplusValues {
    double value, first, second;
};

SoftplusValues softplus(double z, double beta) {
    double bz = beta * z;
    if (bz > 34.0) return {z, 1.0, 0.0};
    if (bz < -34.0) return {0.0, 0.0, 0.0};
    double e = std::exp(bz);
    double sig = e / (1.0 + e);
    return {std::log1p(e) / beta, sig, beta * sig * (1.0 - sig)};
}

}  // namespace

double sigmoid(double x) {
    if (x >= 0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_unit(double x) {
    if (x > 34.0) return x;
    if (x < -34.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double softplus_unit_inverse(double y) {
    if (y > 34.0) return y;
    return std::log(std::expm1(std::max(y, 1e-300)));
}

void PositionalEncoding::encode(std::span<const double> x, std::span<double> out) const {
    size_t k = 0;
    if (include_input)
        for (double v : x) out[k++] = v;
    double freq = 1.0;
    for (int band = 0; band < num_frequencies; ++band) {
        for (double v : x) out[k++] = std::sin(freq * v);
        for (double v : x) out[k++] = std::cos(freq * v);
        freq *= 2.0;
    }
}

void PositionalEncoding::encode_with_derivative(std::span<const double> x, std::span<double> out,
                                                std::span<double> deriv) const {
    size_t k = 0;
    if (include_input)
        for (double v : x) {
            out[k] = v;
            deriv[k++] = 1.0;
        }
    double freq = 1.0;
    for (int band = 0; band < num_frequencies; ++band) {
        for (double v : x) {
            double s = std::sin(freq * v), c = std::cos(freq * v);
            out[k] = s;
            deriv[k++] = freq * c;
        }
        for (double v : x) {
            double s = std::sin(freq * v), c = std::cos(freq * v);
            out[k] = c;
            deriv[k++] = -freq * s;
        }
        freq *= 2.0;
    }
}

int PositionalEncoding::source_coord(int out_index, int input_dim) const {
    return out_index % input_dim;
}

std::vector<double> encode(const PositionalEncoding& pe, std::span<const double> x) {
    std::vector<double> out(pe.output_dim(static_cast<int>(x.size())));
    pe.encode(x, out);
    return out;
}

FieldParams FieldParams::create(const FieldConfig& config, const Vec3& input_center) {
    FieldParams p;
    p.config = config;
    p.input_center = input_center;

    size_t cursor = 0;
    auto alloc = [&cursor](int rows, int cols) {
        size_t off = cursor;
        cursor += size_t(rows) * cols;
        return off;
    };

    for (int l = 0; l < config.geo_hidden_layers; ++l) {
        p.geo_w_.push_back(alloc(config.geo_width, p.geo_in_dim(l)));
        p.geo_b_.push_back(alloc(config.geo_width, 1));
    }
    p.sdf_head_w_ = alloc(1, config.geo_width);
    p.sdf_head_b_ = alloc(1, 1);
    p.occ_head_w_ = alloc(1, config.geo_width);
    p.occ_head_b_ = alloc(1, 1);
    p.feat_head_w_ = alloc(config.geo_feature_dim, config.geo_width);
    p.feat_head_b_ = alloc(config.geo_feature_dim, 1);

    for (int l = 0; l < config.app_hidden_layers; ++l) {
        p.app_w_.push_back(alloc(config.app_width, p.app_in_dim(l)));
        p.app_b_.push_back(alloc(config.app_width, 1));
    }
    p.color_head_w_ = alloc(3, config.app_width);
    p.color_head_b_ = alloc(3, 1);
    p.feature_head_w_ = alloc(config.feature_dim, config.app_width);
    p.feature_head_b_ = alloc(config.feature_dim, 1);

    p.dec_w1_ = alloc(config.feature_dim, config.feature_dim);
    p.dec_b1_ = alloc(config.feature_dim, 1);
    p.dec_w2_ = alloc(3, config.feature_dim);
    p.dec_b2_ = alloc(3, 1);

    p.alpha_raw_ = alloc(1, 1);
    p.beta_raw_ = alloc(1, 1);

    p.data.assign(cursor, 0.0);
    return p;
}

void FieldParams::initialize(uint64_t seed) {
    const FieldConfig& cfg = config;
    if (!(cfg.init_radius > 0))
        throw std::invalid_argument("initialize: init_radius must be resolved to a positive value");
    Rng rng = Rng::keyed(seed, "field_init");

    auto fill_normal = [&](size_t off, size_t count, double mean, double std) {
        for (size_t i = 0; i < count; ++i) data[off + i] = mean + std * rng.next_gaussian();
    };

    // Geometry trunk: sphere initialization. Encoded (sin/cos) columns of the
    // first layer start at zero so the raw coordinates dominate early training.
    for (int l = 0; l < cfg.geo_hidden_layers; ++l) {
        int in_dim = geo_in_dim(l);
        double std = std::sqrt(2.0) / std::sqrt(double(cfg.geo_width));
        fill_normal(geo_w_[l], size_t(cfg.geo_width) * in_dim, 0.0, std);
        if (l == 0) {
            for (int i = 0; i < cfg.geo_width; ++i)
                for (int j = 3; j < in_dim; ++j) data[geo_w_[l] + size_t(i) * in_dim + j] = 0.0;
        }
        std::fill_n(data.begin() + geo_b_[l], cfg.geo_width, 0.0);
    }
    double head_mean = std::sqrt(M_PI) / std::sqrt(double(cfg.geo_width));
    fill_normal(sdf_head_w_, cfg.geo_width, head_mean, 1e-4);
    data[sdf_head_b_] = -cfg.init_radius;

    // Occupancy head starts as a sharpened negation of the SDF head so that
    // sigmoid(occ_logit) agrees with the inside/outside split from step zero.
    constexpr double kOccSharpness = 30.0;
    for (int j = 0; j < cfg.geo_width; ++j)
        data[occ_head_w_ + j] = -kOccSharpness * data[sdf_head_w_ + j];
    data[occ_head_b_] = kOccSharpness * cfg.init_radius;

    fill_normal(feat_head_w_, size_t(cfg.geo_feature_dim) * cfg.geo_width, 0.0,
                std::sqrt(2.0 / double(cfg.geo_width)));
    std::fill_n(data.begin() + feat_head_b_, cfg.geo_feature_dim, 0.0);

    for (int l = 0; l < cfg.app_hidden_layers; ++l) {
        int in_dim = app_in_dim(l);
        fill_normal(app_w_[l], size_t(cfg.app_width) * in_dim, 0.0, std::sqrt(2.0 / double(in_dim)));
        std::fill_n(data.begin() + app_b_[l], cfg.app_width, 0.0);
    }
    fill_normal(color_head_w_, size_t(3) * cfg.app_width, 0.0, 0.1);
    std::fill_n(data.begin() + color_head_b_, 3, 0.0);
    fill_normal(feature_head_w_, size_t(cfg.feature_dim) * cfg.app_width, 0.0, 0.1);
    std::fill_n(data.begin() + feature_head_b_, cfg.feature_dim, 0.0);

    fill_normal(dec_w1_, size_t(cfg.feature_dim) * cfg.feature_dim, 0.0,
                std::sqrt(2.0 / double(cfg.feature_dim)));
    std::fill_n(data.begin() + dec_b1_, cfg.feature_dim, 0.0);
    fill_normal(dec_w2_, size_t(3) * cfg.feature_dim, 0.0, 0.1);
    std::fill_n(data.begin() + dec_b2_, 3, 0.0);

    set_scales(cfg.init_alpha, cfg.init_beta);
}

double FieldParams::alpha_scale() const { return kScaleFloor + softplus_unit(data[alpha_raw_]); }
double FieldParams::beta_scale() const { return kScaleFloor + softplus_unit(data[beta_raw_]); }

void FieldParams::set_scales(double alpha, double beta) {
    if (!(alpha > kScaleFloor && beta > kScaleFloor))
        throw std::invalid_argument("density scales must exceed the positivity floor");
    data[alpha_raw_] = softplus_unit_inverse(alpha - kScaleFloor);
    data[beta_raw_] = softplus_unit_inverse(beta - kScaleFloor);
}

uint64_t FieldParams::architecture_hash() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
        h ^= v;
        h *= 1099511628211ull;
    };
    mix(config.pe_position);
    mix(config.pe_direction);
    mix(config.geo_hidden_layers);
    mix(config.geo_width);
    mix(config.geo_feature_dim);
    mix(config.app_hidden_layers);
    mix(config.app_width);
    mix(config.feature_dim);
    uint64_t beta_bits;
    std::memcpy(&beta_bits, &config.softplus_beta, sizeof(beta_bits));
    mix(beta_bits);
    return h;
}

// ---------------------------------------------------------------------------
// GeometryEval

void GeometryEval::prepare(const FieldConfig& config) {
    config_ = config;
    int L = config.geo_hidden_layers;
    int w = config.geo_width;
    int enc_dim = config.pos_enc_dim();

    enc_.assign(enc_dim, 0.0);
    enc_deriv_.assign(enc_dim, 0.0);
    enc_src_.resize(enc_dim);
    PositionalEncoding pe{config.pe_position, true};
    for (int i = 0; i < enc_dim; ++i) enc_src_[i] = pe.source_coord(i, 3);

    z_.assign(L, std::vector<double>(w, 0.0));
    a_.assign(L, std::vector<double>(w, 0.0));
    sp_.assign(L, std::vector<double>(w, 0.0));
    spp_.assign(L, std::vector<double>(w, 0.0));
    vchain_.assign(L, std::vector<double>(w, 0.0));
    uchain_.assign(L, std::vector<double>(w, 0.0));
    vin_.assign(enc_dim, 0.0);
    feature_.assign(config.geo_feature_dim, 0.0);

    z2bar_.assign(L, std::vector<double>(w, 0.0));
    abar_.assign(w, 0.0);
    zhat_.assign(w, 0.0);
    ubar_.assign(w, 0.0);
    vbar_.assign(w, 0.0);
    vin_bar_.assign(enc_dim, 0.0);
    has_forward_ = false;
}

void GeometryEval::forward(const FieldParams& params, const Vec3& p, bool with_gradient) {
    const FieldConfig& cfg = params.config;
    const double* d = params.data.data();
    int L = cfg.geo_hidden_layers;
    int w = cfg.geo_width;

    double local[3] = {p.x - params.input_center.x, p.y - params.input_center.y,
                       p.z - params.input_center.z};
    PositionalEncoding pe{cfg.pe_position, true};
    pe.encode_with_derivative(std::span<const double>(local, 3), enc_, enc_deriv_);

    const double* prev = enc_.data();
    for (int l = 0; l < L; ++l) {
        matvec(d + params.geo_w(l), prev, d + params.geo_b(l), z_[l].data(), w,
               params.geo_in_dim(l));
        for (int i = 0; i < w; ++i) {
            auto s = softplus(z_[l][i], cfg.softplus_beta);
            a_[l][i] = s.value;
            sp_[l][i] = s.first;
            spp_[l][i] = s.second;
        }
        prev = a_[l].data();
    }

    const double* top = a_[L - 1].data();
    double acc_sdf = 0, acc_occ = 0;
    const double* ws = d + params.sdf_head_w();
    const double* wo = d + params.occ_head_w();
    for (int i = 0; i < w; ++i) {
        acc_sdf += ws[i] * top[i];
        acc_occ += wo[i] * top[i];
    }
    sdf_ = acc_sdf + d[params.sdf_head_b()];
    occ_logit_ = acc_occ + d[params.occ_head_b()];
    matvec(d + params.feat_head_w(), top, d + params.feat_head_b(), feature_.data(),
           cfg.geo_feature_dim, w);

    has_gradient_ = with_gradient;
    if (with_gradient) {
        // Reverse sweep for d(sdf)/d(position); the chain vectors are kept for
        // the second-order backward pass.
        for (int i = 0; i < w; ++i) {
            vchain_[L - 1][i] = ws[i];
            uchain_[L - 1][i] = ws[i] * sp_[L - 1][i];
        }
        for (int l = L - 1; l >= 1; --l) {
            matvec_transposed(d + params.geo_w(l), uchain_[l].data(), vchain_[l - 1].data(), w, w);
            for (int i = 0; i < w; ++i) uchain_[l - 1][i] = vchain_[l - 1][i] * sp_[l - 1][i];
        }
        matvec_transposed(d + params.geo_w(0), uchain_[0].data(), vin_.data(), w,
                          params.geo_in_dim(0));
        Vec3 g{0, 0, 0};
        for (size_t i = 0; i < vin_.size(); ++i) g[enc_src_[i]] += vin_[i] * enc_deriv_[i];
        grad_ = g;
    }
    has_forward_ = true;
}

Vec3 GeometryEval::normal() const {
    double n = norm(grad_);
    return n > 1e-12 ? grad_ / n : Vec3{0, 0, 1};
}

void GeometryEval::backward(const FieldParams& params, double adj_sdf, double adj_occ_logit,
                            const double* adj_feature, const Vec3& adj_grad,
                            std::vector<double>& grad_out) {
    if (!has_forward_) throw std::logic_error("GeometryEval::backward called without forward");
    const FieldConfig& cfg = params.config;
    const double* d = params.data.data();
    double* g = grad_out.data();
    int L = cfg.geo_hidden_layers;
    int w = cfg.geo_width;

    bool grad_path = adj_grad.x != 0 || adj_grad.y != 0 || adj_grad.z != 0;
    if (grad_path && !has_gradient_)
        throw std::logic_error("GeometryEval::backward: gradient adjoint without gradient forward");

    for (int l = 0; l < L; ++l) std::fill(z2bar_[l].begin(), z2bar_[l].end(), 0.0);

    if (grad_path) {
        // Backprop through the gradient chain itself (second-order terms).
        int enc_dim = cfg.pos_enc_dim();
        for (int i = 0; i < enc_dim; ++i)
            vin_bar_[i] = enc_deriv_[i] * adj_grad[enc_src_[i]];

        // vin = W0^T u0
        matvec(d + params.geo_w(0), vin_bar_.data(), nullptr, ubar_.data(), w, enc_dim);
        outer_accumulate(g + params.geo_w(0), uchain_[0].data(), vin_bar_.data(), w, enc_dim);

        for (int l = 0; l < L; ++l) {
            // u_l = v_l * s'(z_l)
            for (int i = 0; i < w; ++i) {
                vbar_[i] = ubar_[i] * sp_[l][i];
                z2bar_[l][i] = ubar_[i] * vchain_[l][i] * spp_[l][i];
            }
            if (l + 1 < L) {
                // v_l = W_{l+1}^T u_{l+1}
                matvec(d + params.geo_w(l + 1), vbar_.data(), nullptr, ubar_.data(), w, w);
                outer_accumulate(g + params.geo_w(l + 1), uchain_[l + 1].data(), vbar_.data(), w, w);
            } else {
                // v_{L-1} = sdf head weights
                axpy(1.0, vbar_.data(), g + params.sdf_head_w(), w);
            }
        }
    }

    // First-order head adjoints.
    const double* top = a_[L - 1].data();
    const double* ws = d + params.sdf_head_w();
    const double* wo = d + params.occ_head_w();
    for (int i = 0; i < w; ++i) abar_[i] = adj_sdf * ws[i] + adj_occ_logit * wo[i];
    if (adj_feature) {
        const double* wf = d + params.feat_head_w();
        for (int k = 0; k < cfg.geo_feature_dim; ++k) {
            double ak = adj_feature[k];
            if (ak == 0.0) continue;
            const double* row = wf + size_t(k) * w;
            for (int i = 0; i < w; ++i) abar_[i] += ak * row[i];
            axpy(ak, top, g + params.feat_head_w() + size_t(k) * w, w);
            g[params.feat_head_b() + k] += ak;
        }
    }
    axpy(adj_sdf, top, g + params.sdf_head_w(), w);
    g[params.sdf_head_b()] += adj_sdf;
    axpy(adj_occ_logit, top, g + params.occ_head_w(), w);
    g[params.occ_head_b()] += adj_occ_logit;

    // Trunk sweep with combined first- and second-order z adjoints.
    for (int l = L - 1; l >= 0; --l) {
        for (int i = 0; i < w; ++i) zhat_[i] = abar_[i] * sp_[l][i] + z2bar_[l][i];
        const double* below = l == 0 ? enc_.data() : a_[l - 1].data();
        outer_accumulate(g + params.geo_w(l), zhat_.data(), below, w, params.geo_in_dim(l));
        axpy(1.0, zhat_.data(), g + params.geo_b(l), w);
        if (l > 0)
            matvec_transposed(d + params.geo_w(l), zhat_.data(), abar_.data(), w, w);
    }
}

// ---------------------------------------------------------------------------
// AppearanceEval

void AppearanceEval::prepare(const FieldConfig& config) {
    config_ = config;
    int A = config.app_hidden_layers;
    int w = config.app_width;
    input_.assign(config.app_input_dim(), 0.0);
    z_.assign(A, std::vector<double>(w, 0.0));
    a_.assign(A, std::vector<double>(w, 0.0));
    hidden_.assign(config.feature_dim, 0.0);
    abar_.assign(w, 0.0);
    zhat_.assign(w, 0.0);
    input_bar_.assign(config.app_input_dim(), 0.0);
    has_forward_ = false;
}

void AppearanceEval::forward(const FieldParams& params, const Vec3& p, const Vec3& view_dir,
                             const Vec3& normal, std::span<const double> geo_feature) {
    const FieldConfig& cfg = params.config;
    const double* d = params.data.data();
    int A = cfg.app_hidden_layers;
    int w = cfg.app_width;

    PositionalEncoding pe{cfg.pe_direction, true};
    double dir[3] = {view_dir.x, view_dir.y, view_dir.z};
    int dir_dim = cfg.dir_enc_dim();
    pe.encode(std::span<const double>(dir, 3), std::span<double>(input_.data(), dir_dim));
    size_t k = dir_dim;
    input_[k++] = p.x - params.input_center.x;
    input_[k++] = p.y - params.input_center.y;
    input_[k++] = p.z - params.input_center.z;
    input_[k++] = normal.x;
    input_[k++] = normal.y;
    input_[k++] = normal.z;
    for (int i = 0; i < cfg.geo_feature_dim; ++i) input_[k++] = geo_feature[i];

    const double* prev = input_.data();
    for (int l = 0; l < A; ++l) {
        matvec(d + params.app_w(l), prev, d + params.app_b(l), z_[l].data(), w,
               params.app_in_dim(l));
        for (int i = 0; i < w; ++i) a_[l][i] = z_[l][i] > 0 ? z_[l][i] : 0.0;
        prev = a_[l].data();
    }

    double logit[3];
    matvec(d + params.color_head_w(), prev, d + params.color_head_b(), logit, 3, w);
    color_logit_ = {logit[0], logit[1], logit[2]};
    color_ = {sigmoid(logit[0]), sigmoid(logit[1]), sigmoid(logit[2])};
    // Bounded hidden features keep composited magnitudes in a range the
    // decoder's sigmoid can act on.
    matvec(d + params.feature_head_w(), prev, d + params.feature_head_b(), hidden_.data(),
           cfg.feature_dim, w);
    for (int k = 0; k < cfg.feature_dim; ++k) hidden_[k] = std::tanh(hidden_[k]);
    has_forward_ = true;
}

void AppearanceEval::backward(const FieldParams& params, const Vec3& adj_color,
                              const double* adj_hidden, std::vector<double>& grad_out,
                              Vec3& adj_normal_out, std::vector<double>& adj_geo_feature_out) {
    if (!has_forward_) throw std::logic_error("AppearanceEval::backward called without forward");
    const FieldConfig& cfg = params.config;
    const double* d = params.data.data();
    double* g = grad_out.data();
    int A = cfg.app_hidden_layers;
    int w = cfg.app_width;

    double logit_bar[3];
    for (int c = 0; c < 3; ++c) {
        double s = color_[c];
        logit_bar[c] = adj_color[c] * s * (1.0 - s);
    }

    const double* top = a_[A - 1].data();
    std::fill(abar_.begin(), abar_.end(), 0.0);
    for (int c = 0; c < 3; ++c) {
        if (logit_bar[c] == 0.0) continue;
        const double* row = d + params.color_head_w() + size_t(c) * w;
        for (int i = 0; i < w; ++i) abar_[i] += logit_bar[c] * row[i];
        axpy(logit_bar[c], top, g + params.color_head_w() + size_t(c) * w, w);
        g[params.color_head_b() + c] += logit_bar[c];
    }
    if (adj_hidden) {
        const double* wh = d + params.feature_head_w();
        for (int k = 0; k < cfg.feature_dim; ++k) {
            // adjoint through tanh: hidden_ already stores tanh(z).
            double ak = adj_hidden[k] * (1.0 - hidden_[k] * hidden_[k]);
            if (ak == 0.0) continue;
            const double* row = wh + size_t(k) * w;
            for (int i = 0; i < w; ++i) abar_[i] += ak * row[i];
            axpy(ak, top, g + params.feature_head_w() + size_t(k) * w, w);
            g[params.feature_head_b() + k] += ak;
        }
    }

    for (int l = A - 1; l >= 0; --l) {
        for (int i = 0; i < w; ++i) zhat_[i] = z_[l][i] > 0 ? abar_[i] : 0.0;
        const double* below = l == 0 ? input_.data() : a_[l - 1].data();
        outer_accumulate(g + params.app_w(l), zhat_.data(), below, w, params.app_in_dim(l));
        axpy(1.0, zhat_.data(), g + params.app_b(l), w);
        if (l > 0) {
            matvec_transposed(d + params.app_w(l), zhat_.data(), abar_.data(), w, w);
        } else {
            matvec_transposed(d + params.app_w(0), zhat_.data(), input_bar_.data(), w,
                              params.app_in_dim(0));
        }
    }

    int n_off = cfg.dir_enc_dim() + 3;
    adj_normal_out = {input_bar_[n_off], input_bar_[n_off + 1], input_bar_[n_off + 2]};
    for (int i = 0; i < cfg.geo_feature_dim; ++i) adj_geo_feature_out[i] = input_bar_[n_off + 3 + i];
}

// ---------------------------------------------------------------------------
// DecoderEval

void DecoderEval::prepare(const FieldConfig& config) {
    config_ = config;
    input_.assign(config.feature_dim, 0.0);
    z1_.assign(config.feature_dim, 0.0);
    a1_.assign(config.feature_dim, 0.0);
    a1_bar_.assign(config.feature_dim, 0.0);
    has_forward_ = false;
}

void DecoderEval::forward(const FieldParams& params, std::span<const double> feature) {
    const FieldConfig& cfg = params.config;
    const double* d = params.data.data();
    int n = cfg.feature_dim;
    std::copy(feature.begin(), feature.end(), input_.begin());
    matvec(d + params.dec_w1(), input_.data(), d + params.dec_b1(), z1_.data(), n, n);
    for (int i = 0; i < n; ++i) a1_[i] = z1_[i] > 0 ? z1_[i] : 0.0;
    double logit[3];
    matvec(d + params.dec_w2(), a1_.data(), d + params.dec_b2(), logit, 3, n);
    color_logit_ = {logit[0], logit[1], logit[2]};
    color_ = {sigmoid(logit[0]), sigmoid(logit[1]), sigmoid(logit[2])};
    has_forward_ = true;
}

void DecoderEval::backward(const FieldParams& params, const Vec3& adj_color,
                           std::vector<double>& grad_out, std::vector<double>& adj_feature_out) {
    if (!has_forward_) throw std::logic_error("DecoderEval::backward called without forward");
    const FieldConfig& cfg = params.config;
    const double* d = params.data.data();
    double* g = grad_out.data();
    int n = cfg.feature_dim;

    std::fill(a1_bar_.begin(), a1_bar_.end(), 0.0);
    for (int c = 0; c < 3; ++c) {
        double s = color_[c];
        double lb = adj_color[c] * s * (1.0 - s);
        if (lb == 0.0) continue;
        const double* row = d + params.dec_w2() + size_t(c) * n;
        for (int i = 0; i < n; ++i) a1_bar_[i] += lb * row[i];
        axpy(lb, a1_.data(), g + params.dec_w2() + size_t(c) * n, n);
        g[params.dec_b2() + c] += lb;
    }
    for (int i = 0; i < n; ++i) a1_bar_[i] = z1_[i] > 0 ? a1_bar_[i] : 0.0;
    outer_accumulate(g + params.dec_w1(), a1_bar_.data(), input_.data(), n, n);
    axpy(1.0, a1_bar_.data(), g + params.dec_b1(), n);
    matvec_transposed(d + params.dec_w1(), a1_bar_.data(), adj_feature_out.data(), n, n);
}

// ---------------------------------------------------------------------------
// One-shot wrappers

GeometrySample geometry_forward(const FieldParams& params, const Vec3& p) {
    GeometryEval eval;
    eval.prepare(params.config);
    eval.forward(params, p, false);
    return {eval.sdf(), eval.occ(), eval.geo_feature()};
}

Vec3 sdf_spatial_gradient(const FieldParams& params, const Vec3& p) {
    GeometryEval eval;
    eval.prepare(params.config);
    eval.forward(params, p, true);
    return eval.sdf_gradient();
}

Vec3 decode_feature(const FieldParams& params, std::span<const double> feature) {
    DecoderEval eval;
    eval.prepare(params.config);
    eval.forward(params, feature);
    return eval.color();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr uint64_t kCheckpointMagic = 0x4f53464b50543031ull;  // "OSFKPT01"

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    return v;
}

void write_block(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_block(std::ifstream& in, std::vector<double>& v, size_t count, const char* what) {
    v.resize(count);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (static_cast<size_t>(in.gcount()) != count * sizeof(double))
        throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
}

}  // namespace

void save_checkpoint(const std::string& path, const FieldParams& params, uint64_t step,
                     const std::vector<double>* adam_m, const std::vector<double>* adam_v) {
    if ((adam_m == nullptr) != (adam_v == nullptr))
        throw CheckpointError("checkpoint requires both Adam moment buffers or neither");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path);

    write_pod(out, kCheckpointMagic);
    write_pod(out, uint32_t{1});
    write_pod(out, params.architecture_hash());
    write_pod(out, uint64_t{params.size()});
    write_pod(out, step);
    write_pod(out, uint8_t(adam_m ? 1 : 0));

    const FieldConfig& c = params.config;
    for (int v : {c.pe_position, c.pe_direction, c.geo_hidden_layers, c.geo_width,
                  c.geo_feature_dim, c.app_hidden_layers, c.app_width, c.feature_dim})
        write_pod(out, int32_t(v));
    write_pod(out, c.softplus_beta);
    write_pod(out, c.init_radius);
    write_pod(out, params.input_center.x);
    write_pod(out, params.input_center.y);
    write_pod(out, params.input_center.z);

    write_block(out, params.data);
    if (adam_m) {
        if (adam_m->size() != params.size() || adam_v->size() != params.size())
            throw CheckpointError("Adam moment buffers do not match parameter count");
        write_block(out, *adam_m);
        write_block(out, *adam_v);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);

    if (read_pod<uint64_t>(in, "magic") != kCheckpointMagic)
        throw CheckpointError("not a checkpoint file: " + path);
    if (read_pod<uint32_t>(in, "version") != 1)
        throw CheckpointError("unsupported checkpoint version in " + path);
    uint64_t arch_hash = read_pod<uint64_t>(in, "architecture hash");
    uint64_t count = read_pod<uint64_t>(in, "parameter count");
    uint64_t step = read_pod<uint64_t>(in, "step");
    uint8_t has_adam = read_pod<uint8_t>(in, "adam flag");

    FieldConfig cfg;
    cfg.pe_position = read_pod<int32_t>(in, "config");
    cfg.pe_direction = read_pod<int32_t>(in, "config");
    cfg.geo_hidden_layers = read_pod<int32_t>(in, "config");
    cfg.geo_width = read_pod<int32_t>(in, "config");
    cfg.geo_feature_dim = read_pod<int32_t>(in, "config");
    cfg.app_hidden_layers = read_pod<int32_t>(in, "config");
    cfg.app_width = read_pod<int32_t>(in, "config");
    cfg.feature_dim = read_pod<int32_t>(in, "config");
    cfg.softplus_beta = read_pod<double>(in, "config");
    cfg.init_radius = read_pod<double>(in, "config");
    Vec3 center;
    center.x = read_pod<double>(in, "input center");
    center.y = read_pod<double>(in, "input center");
    center.z = read_pod<double>(in, "input center");

    Checkpoint ck;
    ck.params = FieldParams::create(cfg, center);
    if (ck.params.architecture_hash() != arch_hash)
        throw CheckpointError("checkpoint architecture hash mismatch in " + path);
    if (ck.params.size() != count)
        throw CheckpointError("checkpoint parameter count mismatch in " + path);
    ck.step = step;
    read_block(in, ck.params.data, count, "parameters");
    if (has_adam) {
        ck.adam_m.emplace();
        ck.adam_v.emplace();
        read_block(in, *ck.adam_m, count, "adam first moments");
        read_block(in, *ck.adam_v, count, "adam second moments");
    }
    return ck;
}

}  // namespace osf
