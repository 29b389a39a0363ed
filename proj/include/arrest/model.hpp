#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "arrest/autodiff.hpp"
#include "arrest/errors.hpp"
#include "arrest/rng.hpp"
#include "arrest/tensor.hpp"

namespace arrest {

// Registered architectures. Both expose the decomposition f = g . h with a
// 128-dimensional representation feeding the final linear classifier.
//
//   small-mlp: 784 -> 256 (relu) -> 128 (linear tap) -> K
//   small-cnn: conv 3x3/s2 -> relu -> conv 3x3/s2 -> relu -> GAP(128) -> K
struct ArchitectureSpec {
    std::string name;
    int num_classes = 10;
    int in_channels = 1;  // used by small-cnn; small-mlp only checks 784 inputs
    int rep_dim = 128;
};

inline constexpr int kMlpInputDim = 784;
inline constexpr int kMlpHidden = 256;
inline constexpr int kCnnC1 = 16;
inline constexpr int kRepDim = 128;

class Model {
public:
    struct NamedParam {
        std::string name;
        Var var;
    };

    static bool is_registered(const std::string& arch) {
        return arch == "small-mlp" || arch == "small-cnn";
    }

    static Model build(const std::string& arch, int num_classes, int in_channels,
                       std::uint64_t seed) {
        if (!is_registered(arch)) throw model_error("unknown architecture '" + arch + "'");
        if (num_classes < 2) throw model_error("build: need at least 2 classes");
        if (in_channels < 1) throw model_error("build: need at least 1 input channel");
        Model m;
        m.arch_ = {arch, num_classes, in_channels, kRepDim};
        Rng rng(mix_seed(seed, 0x6d6f64656cULL));
        if (arch == "small-mlp") {
            m.add_param("fc1.w", init_weight({kMlpInputDim, kMlpHidden}, kMlpInputDim, rng));
            m.add_param("fc1.b", Tensor({kMlpHidden}));
            m.add_param("fc2.w", init_weight({kMlpHidden, kRepDim}, kMlpHidden, rng));
            m.add_param("fc2.b", Tensor({kRepDim}));
        } else {
            m.add_param("conv1.w", init_weight({kCnnC1, in_channels, 3, 3}, in_channels * 9, rng));
            m.add_param("conv1.b", Tensor({kCnnC1}));
            m.add_param("conv2.w", init_weight({kRepDim, kCnnC1, 3, 3}, kCnnC1 * 9, rng));
            m.add_param("conv2.b", Tensor({kRepDim}));
        }
        m.add_param("head.w", init_weight({kRepDim, num_classes}, kRepDim, rng));
        m.add_param("head.b", Tensor({num_classes}));
        return m;
    }

    const ArchitectureSpec& arch() const { return arch_; }
    bool frozen() const { return frozen_; }

    std::vector<NamedParam>& params() { return params_; }
    const std::vector<NamedParam>& params() const { return params_; }

    Var& param(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return p.var;
        throw model_error("no parameter named '" + name + "'");
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.var.value().size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.var.zero_grad();
    }

    // Latent representation h(x): (N,C,H,W) -> (N,128).
    Var represent(const Var& x) const {
        if (arch_.name == "small-mlp") {
            const Tensor& X = x.value();
            if (X.rank() != 4 && X.rank() != 2)
                throw shape_error("represent: expected image batch, got " + X.shape_string());
            const int n = X.dim(0);
            const std::int64_t flat = X.size() / n;
            if (flat != kMlpInputDim)
                throw shape_error("represent: small-mlp expects 784 inputs per example, got " +
                                  X.shape_string());
            Var h = reshape(x, {n, kMlpInputDim});
            h = relu(add_rowvec(matmul(h, cparam("fc1.w")), cparam("fc1.b")));
            return add_rowvec(matmul(h, cparam("fc2.w")), cparam("fc2.b"));
        }
        return global_avg_pool(represent_spatial(x));
    }

    // Pre-pool feature map of small-cnn: (N,C,H,W) -> (N,128,H',W').
    Var represent_spatial(const Var& x) const {
        if (arch_.name != "small-cnn")
            throw model_error("represent_spatial: only small-cnn has a spatial representation");
        const Tensor& X = x.value();
        if (X.rank() != 4)
            throw shape_error("represent_spatial: expected (N,C,H,W), got " + X.shape_string());
        if (X.dim(1) != arch_.in_channels)
            throw shape_error("represent_spatial: expected " +
                              std::to_string(arch_.in_channels) + " channels, got " +
                              X.shape_string());
        Var h = relu(conv2d(x, cparam("conv1.w"), cparam("conv1.b"), /*stride=*/2, /*pad=*/1));
        return relu(conv2d(h, cparam("conv2.w"), cparam("conv2.b"), /*stride=*/2, /*pad=*/1));
    }

    // Classifier head g(r): (N,128) -> (N,K).
    Var head(const Var& rep) const {
        return add_rowvec(matmul(rep, cparam("head.w")), cparam("head.b"));
    }

    // f(x) = g(h(x)).
    Var forward(const Var& x) const { return head(represent(x)); }

    // Deep copy whose parameters never receive gradients and refuse updates.
    Model clone_frozen() const {
        Model m;
        m.arch_ = arch_;
        m.frozen_ = true;
        for (const auto& p : params_)
            m.params_.push_back({p.name, Var::leaf(p.var.value(), /*requires_grad=*/false)});
        return m;
    }

    // Deep copy that trains independently of the source.
    Model clone_trainable() const {
        Model m;
        m.arch_ = arch_;
        m.frozen_ = false;
        for (const auto& p : params_)
            m.params_.push_back({p.name, Var::leaf(p.var.value(), /*requires_grad=*/true)});
        return m;
    }

    void save(const std::filesystem::path& path) const;
    static Model load(const std::filesystem::path& path);

private:
    Var cparam(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return p.var;
        throw model_error("no parameter named '" + name + "'");
    }

    void add_param(const std::string& name, Tensor t) {
        params_.push_back({name, Var::leaf(std::move(t), /*requires_grad=*/true)});
    }

    static Tensor init_weight(std::vector<int> shape, int fan_in, Rng& rng) {
        Tensor t(std::move(shape));
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
        return t;
    }

    ArchitectureSpec arch_;
    std::vector<NamedParam> params_;
    bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Checkpoint format: magic, version, architecture name, K, then named tensors
// as (name length, name, rank, dims, little-endian 64-bit floats).

namespace detail {

inline constexpr char kCkptMagic[8] = {'A', 'R', 'S', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(os, v);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw model_error(std::string("checkpoint truncated while reading ") + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
    std::uint64_t lo = get_u32(is, what);
    std::uint64_t hi = get_u32(is, what);
    return lo | (hi << 32);
}

inline double get_f64(std::istream& is, const char* what) {
    std::uint64_t v = get_u64(is, what);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

inline std::string get_string(std::istream& is, const char* what) {
    std::uint32_t len = get_u32(is, what);
    if (len > 4096) throw model_error(std::string("checkpoint: implausible length for ") + what);
    std::string s(len, '\0');
    if (len && !is.read(s.data(), len))
        throw model_error(std::string("checkpoint truncated while reading ") + what);
    return s;
}

}  // namespace detail

inline void Model::save(const std::filesystem::path& path) const {
    namespace fs = std::filesystem;
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw io_error("cannot write checkpoint '" + tmp.string() + "'");
        os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
        detail::put_u32(os, detail::kCkptVersion);
        detail::put_u32(os, static_cast<std::uint32_t>(arch_.name.size()));
        os.write(arch_.name.data(), static_cast<std::streamsize>(arch_.name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(arch_.num_classes));
        detail::put_u32(os, static_cast<std::uint32_t>(params_.size()));
        for (const auto& p : params_) {
            detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
            os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
            const Tensor& t = p.var.value();
            detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
            for (int d = 0; d < t.rank(); ++d)
                detail::put_u64(os, static_cast<std::uint64_t>(t.dim(d)));
            for (std::int64_t i = 0; i < t.size(); ++i) detail::put_f64(os, t[i]);
        }
        if (!os) throw io_error("failed writing checkpoint '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

inline Model Model::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open checkpoint '" + path.string() + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw model_error("not a model checkpoint: '" + path.string() + "'");
    const std::uint32_t version = detail::get_u32(is, "version");
    if (version != detail::kCkptVersion)
        throw model_error("unsupported checkpoint version " + std::to_string(version));
    const std::string arch = detail::get_string(is, "architecture");
    if (!is_registered(arch)) throw model_error("checkpoint names unknown architecture '" + arch + "'");
    const int num_classes = static_cast<int>(detail::get_u32(is, "class count"));
    const std::uint32_t count = detail::get_u32(is, "tensor count");

    std::vector<NamedParam> loaded;
    for (std::uint32_t t = 0; t < count; ++t) {
        std::string name = detail::get_string(is, "tensor name");
        const std::uint32_t rank = detail::get_u32(is, "tensor rank");
        if (rank > 8) throw model_error("checkpoint: implausible tensor rank");
        std::vector<int> dims(rank);
        std::int64_t n = 1;
        for (auto& d : dims) {
            const std::uint64_t v = detail::get_u64(is, "tensor dims");
            if (v == 0 || v > (1u << 24)) throw model_error("checkpoint: corrupted length header");
            d = static_cast<int>(v);
            n *= d;
        }
        Tensor tensor(dims);
        for (std::int64_t i = 0; i < n; ++i) tensor[i] = detail::get_f64(is, "tensor data");
        loaded.push_back({std::move(name), Var::leaf(std::move(tensor), true)});
    }
    is.peek();
    if (!is.eof()) throw model_error("checkpoint has trailing bytes: '" + path.string() + "'");

    // Rebuild the architecture and overlay the stored parameters.
    int in_channels = 1;
    if (arch == "small-cnn") {
        for (const auto& p : loaded)
            if (p.name == "conv1.w" && p.var.value().rank() == 4)
                in_channels = p.var.value().dim(1);
    }
    Model m = build(arch, num_classes, in_channels, /*seed=*/0);
    if (loaded.size() != m.params_.size())
        throw model_error("checkpoint tensor set does not match architecture '" + arch + "'");
    for (auto& p : m.params_) {
        bool found = false;
        for (auto& l : loaded) {
            if (l.name != p.name) continue;
            if (!(l.var.value().shape() == p.var.value().shape()))
                throw model_error("checkpoint tensor '" + p.name + "' has shape " +
                                  l.var.value().shape_string() + ", expected " +
                                  p.var.value().shape_string());
            p.var.mutable_value() = l.var.value();
            found = true;
            break;
        }
        if (!found) throw model_error("checkpoint is missing tensor '" + p.name + "'");
    }
    return m;
}

// First index of the row maximum; ties resolve to the lowest index.
inline int argmax_row(const Tensor& logits, int row) {
    const int k = logits.dim(1);
    int best = 0;
    for (int j = 1; j < k; ++j)
        if (logits[row * k + j] > logits[row * k + best]) best = j;
    return best;
}

}  // namespace arrest
