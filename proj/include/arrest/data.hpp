#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "arrest/errors.hpp"
#include "arrest/rng.hpp"
#include "arrest/tensor.hpp"

namespace arrest {

// Immutable after load. Pixels live in [0,1] (raw byte / 255); the attack
// budget therefore shares units with the data.
struct Dataset {
    Tensor images;            // (n, C, H, W)
    std::vector<int> labels;  // each in [0, num_classes)
    int num_classes = 10;
    std::string name;

    int n() const { return images.rank() > 0 ? images.dim(0) : 0; }

    void validate() const {
        if (images.rank() != 4 || n() <= 0) throw data_error("dataset: empty or malformed image tensor");
        if (static_cast<int>(labels.size()) != n())
            throw data_error("dataset: label count does not match image count");
        for (double v : images.values())
            if (!(v >= 0.0 && v <= 1.0)) throw data_error("dataset: pixel outside [0,1]");
        for (int y : labels)
            if (y < 0 || y >= num_classes) throw data_error("dataset: label out of range");
    }
};

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: 3073-byte records, 1 label byte then 3072 pixel
// bytes in channel-planar R,G,B order. A file may hold any number of records.

inline Dataset load_cifar10_binary(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open '" + path.string() + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    constexpr std::size_t kRecord = 3073;
    if (bytes.empty() || bytes.size() % kRecord != 0)
        throw data_error("'" + path.string() + "': size " + std::to_string(bytes.size()) +
                         " is not a multiple of 3073");
    const int n = static_cast<int>(bytes.size() / kRecord);

    Dataset ds;
    ds.name = "cifar10";
    ds.num_classes = 10;
    ds.images = Tensor({n, 3, 32, 32});
    ds.labels.resize(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * kRecord;
        const unsigned char label = static_cast<unsigned char>(bytes[off]);
        if (label > 9)
            throw data_error("'" + path.string() + "': label byte " + std::to_string(label) +
                             " > 9 at offset " + std::to_string(off));
        ds.labels[static_cast<std::size_t>(r)] = label;
        for (std::size_t i = 0; i < 3072; ++i)
            ds.images[r * 3072 + static_cast<std::int64_t>(i)] =
                static_cast<unsigned char>(bytes[off + 1 + i]) / 255.0;
    }
    return ds;
}

inline void save_cifar10_binary(const Dataset& ds, const std::filesystem::path& path) {
    if (ds.images.rank() != 4 || ds.images.dim(1) != 3 || ds.images.dim(2) != 32 ||
        ds.images.dim(3) != 32)
        throw data_error("save_cifar10_binary: dataset is not (n,3,32,32)");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot write '" + path.string() + "'");
    for (int r = 0; r < ds.n(); ++r) {
        os.put(static_cast<char>(ds.labels[static_cast<std::size_t>(r)]));
        for (std::int64_t i = 0; i < 3072; ++i) {
            const long b = std::lround(ds.images[r * 3072 + i] * 255.0);
            os.put(static_cast<char>(std::clamp(b, 0L, 255L)));
        }
    }
}

// ---------------------------------------------------------------------------
// IDX format (big-endian headers). Images magic 0x00000803, labels 0x00000801.

namespace detail {

inline std::uint32_t get_be32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw data_error("truncated IDX header: " + what);
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

inline void put_be32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

inline Dataset load_mnist_idx(const std::filesystem::path& images_path,
                              const std::filesystem::path& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw io_error("cannot open '" + images_path.string() + "'");
    if (detail::get_be32(imgs, "image magic") != 0x00000803u)
        throw data_error("'" + images_path.string() + "': bad image magic (want 0x00000803)");
    const int n = static_cast<int>(detail::get_be32(imgs, "image count"));
    const int h = static_cast<int>(detail::get_be32(imgs, "rows"));
    const int w = static_cast<int>(detail::get_be32(imgs, "cols"));
    if (n <= 0 || h <= 0 || w <= 0) throw data_error("IDX image header has nonpositive dimension");

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw io_error("cannot open '" + labels_path.string() + "'");
    if (detail::get_be32(labs, "label magic") != 0x00000801u)
        throw data_error("'" + labels_path.string() + "': bad label magic (want 0x00000801)");
    const int ln = static_cast<int>(detail::get_be32(labs, "label count"));
    if (ln != n)
        throw data_error("IDX image/label count mismatch: " + std::to_string(n) + " vs " +
                         std::to_string(ln));

    Dataset ds;
    ds.name = "mnist";
    ds.num_classes = 10;
    ds.images = Tensor({n, 1, h, w});
    ds.labels.resize(static_cast<std::size_t>(n));
    std::vector<char> buf(static_cast<std::size_t>(h) * w);
    for (int r = 0; r < n; ++r) {
        if (!imgs.read(buf.data(), static_cast<std::streamsize>(buf.size())))
            throw data_error("'" + images_path.string() + "': truncated at record " +
                             std::to_string(r));
        for (std::size_t i = 0; i < buf.size(); ++i)
            ds.images[static_cast<std::int64_t>(r) * h * w + static_cast<std::int64_t>(i)] =
                static_cast<unsigned char>(buf[i]) / 255.0;
        char lb;
        if (!labs.get(lb))
            throw data_error("'" + labels_path.string() + "': truncated at record " +
                             std::to_string(r));
        const unsigned char label = static_cast<unsigned char>(lb);
        if (label > 9)
            throw data_error("'" + labels_path.string() + "': label " + std::to_string(label) +
                             " > 9 at record " + std::to_string(r));
        ds.labels[static_cast<std::size_t>(r)] = label;
    }
    return ds;
}

inline void save_mnist_idx(const Dataset& ds, const std::filesystem::path& images_path,
                           const std::filesystem::path& labels_path) {
    if (ds.images.rank() != 4 || ds.images.dim(1) != 1)
        throw data_error("save_mnist_idx: dataset is not single-channel");
    const int n = ds.n(), h = ds.images.dim(2), w = ds.images.dim(3);
    {
        std::ofstream os(images_path, std::ios::binary | std::ios::trunc);
        if (!os) throw io_error("cannot write '" + images_path.string() + "'");
        detail::put_be32(os, 0x00000803u);
        detail::put_be32(os, static_cast<std::uint32_t>(n));
        detail::put_be32(os, static_cast<std::uint32_t>(h));
        detail::put_be32(os, static_cast<std::uint32_t>(w));
        for (std::int64_t i = 0; i < ds.images.size(); ++i) {
            const long b = std::lround(ds.images[i] * 255.0);
            os.put(static_cast<char>(std::clamp(b, 0L, 255L)));
        }
    }
    {
        std::ofstream os(labels_path, std::ios::binary | std::ios::trunc);
        if (!os) throw io_error("cannot write '" + labels_path.string() + "'");
        detail::put_be32(os, 0x00000801u);
        detail::put_be32(os, static_cast<std::uint32_t>(n));
        for (int y : ds.labels) os.put(static_cast<char>(y));
    }
}

// ---------------------------------------------------------------------------
// Subsets and batching

// Class-balanced deterministic subsample: per_class examples of every class.
inline Dataset subset(const Dataset& ds, int per_class, std::uint64_t seed) {
    if (per_class < 1) throw data_error("subset: per_class must be >= 1");
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (int i = 0; i < ds.n(); ++i)
        by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);

    std::vector<int> chosen;
    for (int c = 0; c < ds.num_classes; ++c) {
        auto& idx = by_class[static_cast<std::size_t>(c)];
        if (static_cast<int>(idx.size()) < per_class)
            throw data_error("subset: class " + std::to_string(c) + " has only " +
                             std::to_string(idx.size()) + " examples, need " +
                             std::to_string(per_class));
        Rng rng(mix_seed(seed, 0x737562ULL, static_cast<std::uint64_t>(c)));
        rng.shuffle(idx);
        chosen.insert(chosen.end(), idx.begin(), idx.begin() + per_class);
    }

    const std::int64_t row = ds.images.size() / ds.n();
    std::vector<int> shape = ds.images.shape();
    shape[0] = static_cast<int>(chosen.size());
    Dataset out;
    out.name = ds.name;
    out.num_classes = ds.num_classes;
    out.images = Tensor(shape);
    out.labels.resize(chosen.size());
    for (std::size_t r = 0; r < chosen.size(); ++r) {
        const int src = chosen[r];
        for (std::int64_t j = 0; j < row; ++j)
            out.images[static_cast<std::int64_t>(r) * row + j] = ds.images[src * row + j];
        out.labels[r] = ds.labels[static_cast<std::size_t>(src)];
    }
    return out;
}

// Disjoint class-balanced train/eval split from one pool. train_per_class = 0
// takes everything left after the eval rows are removed.
inline std::pair<Dataset, Dataset> split_per_class(const Dataset& ds, int train_per_class,
                                                   int eval_per_class, std::uint64_t seed) {
    if (eval_per_class < 0 || train_per_class < 0)
        throw data_error("split: negative per-class count");
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (int i = 0; i < ds.n(); ++i)
        by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);

    std::vector<int> train_idx, eval_idx;
    for (int c = 0; c < ds.num_classes; ++c) {
        auto& idx = by_class[static_cast<std::size_t>(c)];
        const int want_train =
            train_per_class == 0 ? static_cast<int>(idx.size()) - eval_per_class : train_per_class;
        if (want_train < 1 || want_train + eval_per_class > static_cast<int>(idx.size()))
            throw data_error("split: class " + std::to_string(c) + " has only " +
                             std::to_string(idx.size()) + " examples, need " +
                             std::to_string(want_train + eval_per_class));
        Rng rng(mix_seed(seed, 0x73706c6974ULL, static_cast<std::uint64_t>(c)));
        rng.shuffle(idx);
        train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + want_train);
        eval_idx.insert(eval_idx.end(), idx.begin() + want_train,
                        idx.begin() + want_train + eval_per_class);
    }

    auto take = [&ds](const std::vector<int>& rows) {
        const std::int64_t row = ds.images.size() / ds.n();
        std::vector<int> shape = ds.images.shape();
        shape[0] = static_cast<int>(rows.size());
        Dataset out;
        out.name = ds.name;
        out.num_classes = ds.num_classes;
        out.images = Tensor(shape);
        out.labels.resize(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::int64_t j = 0; j < row; ++j)
                out.images[static_cast<std::int64_t>(r) * row + j] = ds.images[rows[r] * row + j];
            out.labels[r] = ds.labels[static_cast<std::size_t>(rows[r])];
        }
        return out;
    };
    Dataset eval_ds;
    if (eval_per_class > 0) eval_ds = take(eval_idx);
    return {take(train_idx), std::move(eval_ds)};
}

struct BatchPlan {
    int batch_size = 64;
    std::uint64_t seed = 0;
    bool drop_last = false;
};

// Deterministic keyed shuffle: the order depends only on (plan.seed, epoch).
inline std::vector<std::vector<int>> epoch_batches(int n, const BatchPlan& plan, int epoch) {
    if (plan.batch_size < 1) throw data_error("batches: batch_size must be >= 1");
    if (plan.drop_last && plan.batch_size > n)
        throw data_error("batches: batch_size exceeds dataset size with drop_last");
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(plan.seed, static_cast<std::uint64_t>(epoch), 0x626174ULL));
    rng.shuffle(order);

    std::vector<std::vector<int>> batches;
    for (int start = 0; start < n; start += plan.batch_size) {
        const int end = std::min(n, start + plan.batch_size);
        if (plan.drop_last && end - start < plan.batch_size) break;
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

// Gather rows into a batch tensor plus labels.
inline std::pair<Tensor, std::vector<int>> gather_batch(const Dataset& ds,
                                                        const std::vector<int>& indices) {
    const std::int64_t row = ds.images.size() / ds.n();
    std::vector<int> shape = ds.images.shape();
    shape[0] = static_cast<int>(indices.size());
    Tensor x(shape);
    std::vector<int> y(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        for (std::int64_t j = 0; j < row; ++j)
            x[static_cast<std::int64_t>(r) * row + j] = ds.images[indices[r] * row + j];
        y[r] = ds.labels[static_cast<std::size_t>(indices[r])];
    }
    return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------------------
// Synthetic toy sets: smooth per-class templates with random shifts and pixel
// noise. Learnable by the registered models yet not linearly trivial.

inline Dataset make_synthetic_images(int per_class, int num_classes, int channels, int h, int w,
                                     std::uint64_t seed, double noise = 0.2, int max_shift = 3) {
    if (per_class < 1 || num_classes < 2) throw data_error("synthetic: bad shape request");
    // Class templates: a few smooth bumps per channel.
    Rng trng(mix_seed(seed, 0x74656d70ULL));
    std::vector<std::vector<double>> templates(static_cast<std::size_t>(num_classes));
    for (auto& t : templates) {
        t.assign(static_cast<std::size_t>(channels) * h * w, 0.0);
        for (int c = 0; c < channels; ++c)
            for (int bump = 0; bump < 3; ++bump) {
                const double cx = trng.uniform(0.15, 0.85) * w;
                const double cy = trng.uniform(0.15, 0.85) * h;
                const double amp = trng.uniform(0.5, 1.0);
                const double r2 = 2.0 * std::pow(trng.uniform(0.08, 0.22) * h, 2);
                for (int yy = 0; yy < h; ++yy)
                    for (int xx = 0; xx < w; ++xx) {
                        const double d2 = (xx - cx) * (xx - cx) + (yy - cy) * (yy - cy);
                        t[static_cast<std::size_t>((c * h + yy) * w + xx)] += amp * std::exp(-d2 / r2);
                    }
            }
    }

    const int n = per_class * num_classes;
    Dataset ds;
    ds.name = "synthetic";
    ds.num_classes = num_classes;
    ds.images = Tensor({n, channels, h, w});
    ds.labels.resize(static_cast<std::size_t>(n));
    int r = 0;
    for (int k = 0; k < num_classes; ++k)
        for (int e = 0; e < per_class; ++e, ++r) {
            Rng erng(mix_seed(seed, 0x6578ULL, static_cast<std::uint64_t>(k),
                              static_cast<std::uint64_t>(e)));
            const int dx = static_cast<int>(erng.uniform_index(static_cast<std::uint64_t>(2 * max_shift + 1))) - max_shift;
            const int dy = static_cast<int>(erng.uniform_index(static_cast<std::uint64_t>(2 * max_shift + 1))) - max_shift;
            const auto& t = templates[static_cast<std::size_t>(k)];
            for (int c = 0; c < channels; ++c)
                for (int yy = 0; yy < h; ++yy)
                    for (int xx = 0; xx < w; ++xx) {
                        const int sy = ((yy + dy) % h + h) % h;
                        const int sx = ((xx + dx) % w + w) % w;
                        double v = t[static_cast<std::size_t>((c * h + sy) * w + sx)] +
                                   erng.uniform(-noise, noise);
                        ds.images[((static_cast<std::int64_t>(r) * channels + c) * h + yy) * w + xx] =
                            std::clamp(v, 0.0, 1.0);
                    }
            ds.labels[static_cast<std::size_t>(r)] = k;
        }
    return ds;
}

}  // namespace arrest
