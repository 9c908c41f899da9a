#include "psvma/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace psvma {

namespace {

constexpr char kMagic[] = "PSVMACKPT";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xff;
    out.write(reinterpret_cast<char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
    out.write(reinterpret_cast<char*>(b), 8);
}

void write_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, 8);
    write_u64(out, bits);
}

void write_string(std::ostream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

[[noreturn]] void corrupt(const std::string& path) {
    throw std::runtime_error("corrupt checkpoint file: " + path);
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) corrupt(path);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& in, const std::string& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) corrupt(path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

double read_f64(std::istream& in, const std::string& path) {
    const std::uint64_t bits = read_u64(in, path);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

std::string read_string(std::istream& in, const std::string& path) {
    const std::uint64_t len = read_u64(in, path);
    if (len > (1ull << 32)) corrupt(path);
    std::string s(len, '\0');
    if (len && !in.read(s.data(), static_cast<std::streamsize>(len))) corrupt(path);
    return s;
}

double finite_or_throw(const Tensor& t, const char* component) {
    const double v = t.item();
    if (!std::isfinite(v))
        throw std::runtime_error(std::string(component) + " is not finite");
    return v;
}

struct SampleLoss {
    Tensor l_cls, l_sem, d_kl, l_deb;
};

SampleLoss sample_losses(const PsvmaModel& model, const std::vector<Tensor>& visual,
                         std::size_t label, const TrainSettings& settings,
                         PsvmaModel::Decisions* decisions) {
    const AttributeTable& table = model.table();
    if (!table.is_seen(label))
        throw std::invalid_argument("training: label " + std::to_string(label) +
                                    " is not a seen class");
    PsvmaModel::Forward fwd = model.forward(visual, label, settings.scgl_mode, decisions);
    SampleLoss out;
    out.l_cls = classification_loss(fwd.scores_seen, table.seen_index(label),
                                    model.config().tau, model.config().cls_temperature);
    out.l_sem = fwd.l_sem;
    out.d_kl = fwd.d_kl;
    out.l_deb = debias_loss(fwd.scores_all, table);
    return out;
}

}  // namespace

void TrainSettings::validate() const {
    if (lambda_sem < 0 || lambda_kl < 0 || lambda_deb < 0)
        throw std::invalid_argument("train settings: loss weights must be nonnegative");
    if (lr <= 0) throw std::invalid_argument("train settings: learning rate must be positive");
    if (batch == 0) throw std::invalid_argument("train settings: empty batch");
}

Tensor classification_loss(const Tensor& scores_seen, std::size_t y_seen_index, double tau,
                           bool tempered) {
    if (scores_seen.rank() != 1 || scores_seen.size() == 0)
        throw std::invalid_argument("classification_loss: rank-1 scores required");
    if (y_seen_index >= scores_seen.size())
        throw std::invalid_argument("classification_loss: target index " +
                                    std::to_string(y_seen_index) + " out of range");
    if (tempered && tau <= 0.0)
        throw std::invalid_argument("classification_loss: temperature must be positive");
    Tensor z = tempered ? scale(scores_seen, 1.0 / tau) : scores_seen;
    double zmax = z[0];
    for (std::size_t i = 1; i < z.size(); ++i) zmax = std::max(zmax, z[i]);
    Tensor lse = add_scalar(log_elem(sum(exp_elem(add_scalar(z, -zmax)))), zmax);
    return sub(lse, pick(z, y_seen_index));
}

Tensor debias_loss(const Tensor& scores_all, const AttributeTable& table) {
    if (table.seen_ids.empty() || table.unseen_ids.empty())
        throw std::invalid_argument("debias_loss: both class splits must be non-empty");
    if (scores_all.rank() != 1 || scores_all.size() != table.num_classes)
        throw std::invalid_argument("debias_loss: expected one score per class, got " +
                                    shape_str(scores_all.shape()));
    auto stats = [&](const std::vector<std::size_t>& ids) {
        std::vector<double> mask(table.num_classes, 0.0);
        for (std::size_t id : ids) mask[id] = 1.0;
        Tensor m = Tensor::from_data({table.num_classes}, std::move(mask));
        const double inv = 1.0 / static_cast<double>(ids.size());
        Tensor mean = scale(dot(scores_all, m), inv);
        Tensor mean_sq = scale(dot(mul(scores_all, scores_all), m), inv);
        Tensor var = sub(mean_sq, mul(mean, mean));  // population variance
        return std::make_pair(mean, var);
    };
    auto [mean_s, var_s] = stats(table.seen_ids);
    auto [mean_u, var_u] = stats(table.unseen_ids);
    Tensor dm = sub(mean_s, mean_u);
    Tensor dv = sub(var_s, var_u);
    return add(mul(dm, dm), mul(dv, dv));
}

Tensor total_loss(const LossParts& parts, const TrainSettings& settings) {
    finite_or_throw(parts.l_cls, "classification loss");
    Tensor total = parts.l_cls;
    if (settings.lambda_sem > 0.0) {
        finite_or_throw(parts.l_sem, "semantic alignment loss");
        total = add(total, scale(parts.l_sem, settings.lambda_sem));
    }
    if (settings.lambda_kl > 0.0) {
        finite_or_throw(parts.d_kl, "cross-granularity KL loss");
        total = add(total, scale(parts.d_kl, settings.lambda_kl));
    }
    if (settings.lambda_deb > 0.0) {
        finite_or_throw(parts.l_deb, "debiasing loss");
        total = add(total, scale(parts.l_deb, settings.lambda_deb));
    }
    return total;
}

Checkpoint snapshot(const PsvmaModel& model, const std::string& config_text,
                    std::uint64_t epoch, const std::string& rng_state) {
    Checkpoint ckpt;
    ckpt.config_text = config_text;
    ckpt.epoch = epoch;
    ckpt.rng_state = rng_state;
    for (const auto& [name, t] : model.parameters())
        ckpt.entries[name] = {t.shape(), t.data()};
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kMagic, kMagicLen);
    write_u32(out, ckpt.version);
    write_string(out, ckpt.config_text);
    write_u64(out, ckpt.epoch);
    write_string(out, ckpt.rng_state);
    write_u64(out, ckpt.entries.size());
    for (const auto& [name, entry] : ckpt.entries) {
        write_string(out, name);
        write_u32(out, static_cast<std::uint32_t>(entry.shape.size()));
        for (std::size_t d : entry.shape) write_u64(out, d);
        for (double v : entry.values) write_f64(out, v);
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[kMagicLen];
    if (!in.read(magic, kMagicLen) || std::string(magic, kMagicLen) != kMagic) corrupt(path);
    Checkpoint ckpt;
    ckpt.version = read_u32(in, path);
    if (ckpt.version != 1)
        throw std::runtime_error("checkpoint version mismatch: " + path + " has version " +
                                 std::to_string(ckpt.version));
    ckpt.config_text = read_string(in, path);
    ckpt.epoch = read_u64(in, path);
    ckpt.rng_state = read_string(in, path);
    const std::uint64_t count = read_u64(in, path);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = read_string(in, path);
        const std::uint32_t rank = read_u32(in, path);
        if (rank > 8) corrupt(path);
        Checkpoint::Entry entry;
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            entry.shape.push_back(read_u64(in, path));
            n *= entry.shape.back();
        }
        entry.values.reserve(n);
        for (std::size_t k = 0; k < n; ++k) entry.values.push_back(read_f64(in, path));
        ckpt.entries[name] = std::move(entry);
    }
    return ckpt;
}

void apply_checkpoint(PsvmaModel& model, const Checkpoint& ckpt) {
    auto params = model.parameters();
    std::size_t used = 0;
    for (auto& [name, t] : params) {
        auto it = ckpt.entries.find(name);
        if (it == ckpt.entries.end())
            throw std::runtime_error("checkpoint is missing parameter '" + name + "'");
        if (it->second.shape != t.shape())
            throw std::runtime_error("checkpoint shape mismatch for parameter '" + name +
                                     "': file has " + shape_str(it->second.shape) +
                                     ", model expects " + shape_str(t.shape()));
        t.mutable_data() = it->second.values;
        ++used;
    }
    if (used != ckpt.entries.size())
        for (const auto& [name, entry] : ckpt.entries)
            if (std::none_of(params.begin(), params.end(),
                             [&](const auto& p) { return p.first == name; }))
                throw std::runtime_error("checkpoint has unknown parameter '" + name + "'");
}

namespace {

double seen_validation_accuracy(const PsvmaModel& model,
                                const std::vector<std::vector<Tensor>>& features,
                                const std::vector<Sample>& samples) {
    if (samples.empty()) return 0.0;
    const AttributeTable& table = model.table();
    std::vector<std::size_t> correct(table.num_classes, 0), total(table.num_classes, 0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        PsvmaModel::Forward fwd = model.forward(features[i], samples[i].label);
        std::size_t best = 0;
        for (std::size_t k = 1; k < table.seen_ids.size(); ++k)
            if (fwd.scores_seen[k] > fwd.scores_seen[best]) best = k;
        total[samples[i].label] += 1;
        correct[samples[i].label] += table.seen_ids[best] == samples[i].label;
    }
    double acc = 0.0;
    std::size_t classes = 0;
    for (std::size_t y = 0; y < table.num_classes; ++y) {
        if (total[y] == 0) continue;
        acc += static_cast<double>(correct[y]) / static_cast<double>(total[y]);
        ++classes;
    }
    return classes ? 100.0 * acc / static_cast<double>(classes) : 0.0;
}

}  // namespace

TrainResult train(const Dataset& ds, PsvmaModel& model, const TrainSettings& settings,
                  const std::string& config_text, std::ostream* progress) {
    settings.validate();
    if (ds.train.empty()) throw std::invalid_argument("training: empty train set");

    auto params = model.parameters();
    std::vector<std::vector<double>> velocity(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        velocity[i].assign(params[i].second.size(), 0.0);

    // features are deterministic per sample, so extract once
    std::vector<std::vector<Tensor>> train_feats;
    train_feats.reserve(ds.train.size());
    for (const Sample& s : ds.train) train_feats.push_back(model.visual_features(s));
    std::vector<std::vector<Tensor>> val_feats;
    val_feats.reserve(ds.test_seen.size());
    for (const Sample& s : ds.test_seen) val_feats.push_back(model.visual_features(s));

    std::mt19937_64 shuffle_rng(mix_seed(settings.seed, 0x5f0f));
    std::vector<std::size_t> order(ds.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainResult result;
    for (std::size_t epoch = 1; epoch <= settings.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochRow row;
        row.epoch = epoch;
        std::size_t seen_samples = 0;

        for (std::size_t start = 0; start < order.size(); start += settings.batch) {
            const std::size_t batch_n = std::min(settings.batch, order.size() - start);
            const std::size_t batch_index = start / settings.batch;
            model.zero_grad();

            Tensor cls_sum, sem_sum, kl_sum, deb_sum;
            double kl_value = 0.0;
            for (std::size_t b = 0; b < batch_n; ++b) {
                const std::size_t idx = order[start + b];
                SampleLoss sl = sample_losses(model, train_feats[idx], ds.train[idx].label,
                                              settings, nullptr);
                cls_sum = cls_sum.defined() ? add(cls_sum, sl.l_cls) : sl.l_cls;
                sem_sum = sem_sum.defined() ? add(sem_sum, sl.l_sem) : sl.l_sem;
                kl_sum = kl_sum.defined() ? add(kl_sum, sl.d_kl) : sl.d_kl;
                deb_sum = deb_sum.defined() ? add(deb_sum, sl.l_deb) : sl.l_deb;
                kl_value += sl.d_kl.item();
            }
            const double inv = 1.0 / static_cast<double>(batch_n);
            LossParts parts{scale(cls_sum, inv), scale(sem_sum, inv), scale(kl_sum, inv),
                            scale(deb_sum, inv)};
            Tensor total;
            try {
                total = total_loss(parts, settings);
            } catch (const std::exception& e) {
                throw std::runtime_error("training diverged at epoch " +
                                         std::to_string(epoch) + " batch " +
                                         std::to_string(batch_index) + ": " + e.what());
            }
            const double total_value = total.item();
            if (!std::isfinite(total_value))
                throw std::runtime_error("training diverged at epoch " +
                                         std::to_string(epoch) + " batch " +
                                         std::to_string(batch_index) + ": loss is not finite");
            backward(total);

            for (std::size_t i = 0; i < params.size(); ++i) {
                auto& data = params[i].second.mutable_data();
                const auto& grad = params[i].second.grad();
                auto& vel = velocity[i];
                for (std::size_t k = 0; k < data.size(); ++k) {
                    vel[k] = settings.momentum * vel[k] + grad[k];
                    data[k] -= settings.lr * vel[k];
                }
            }

            row.l_cls += parts.l_cls.item() * batch_n;
            row.l_sem += parts.l_sem.item() * batch_n;
            row.d_kl += kl_value;
            row.l_deb += parts.l_deb.item() * batch_n;
            row.total += total_value * batch_n;
            seen_samples += batch_n;
        }

        const double inv_n = 1.0 / static_cast<double>(seen_samples);
        row.l_cls *= inv_n;
        row.l_sem *= inv_n;
        row.d_kl *= inv_n;
        row.l_deb *= inv_n;
        row.total *= inv_n;
        row.seen_val_acc = seen_validation_accuracy(model, val_feats, ds.test_seen);
        result.log.push_back(row);
        if (progress)
            (*progress) << "epoch " << epoch << " total " << row.total << " l_cls "
                        << row.l_cls << " val " << row.seen_val_acc << "%\n";
    }

    std::ostringstream rng_state;
    rng_state << shuffle_rng;
    result.checkpoint =
        snapshot(model, config_text, settings.epochs, rng_state.str());
    return result;
}

void write_epoch_log(const std::vector<EpochRow>& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write epoch log: " + path);
    out << "epoch,l_cls,l_sem,d_kl,l_deb,total,seen_val_acc\n";
    char buf[200];
    for (const EpochRow& r : log) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch,
                      r.l_cls, r.l_sem, r.d_kl, r.l_deb, r.total, r.seen_val_acc);
        out << buf;
    }
}

double model_grad_check(PsvmaModel& model, const Dataset& ds, const TrainSettings& settings,
                        std::size_t batch_size, double h, std::size_t coords_per_param) {
    if (ds.train.size() < batch_size)
        throw std::invalid_argument("model_grad_check: train set smaller than batch");
    std::vector<std::vector<Tensor>> feats;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < batch_size; ++i) {
        feats.push_back(model.visual_features(ds.train[i]));
        labels.push_back(ds.train[i].label);
    }
    // decision constants recorded on the first evaluation, replayed afterwards
    std::vector<PsvmaModel::Decisions> decisions(batch_size);
    auto loss = [&] {
        Tensor cls_sum, sem_sum, kl_sum, deb_sum;
        for (std::size_t b = 0; b < batch_size; ++b) {
            SampleLoss sl =
                sample_losses(model, feats[b], labels[b], settings, &decisions[b]);
            cls_sum = cls_sum.defined() ? add(cls_sum, sl.l_cls) : sl.l_cls;
            sem_sum = sem_sum.defined() ? add(sem_sum, sl.l_sem) : sl.l_sem;
            kl_sum = kl_sum.defined() ? add(kl_sum, sl.d_kl) : sl.d_kl;
            deb_sum = deb_sum.defined() ? add(deb_sum, sl.l_deb) : sl.l_deb;
        }
        const double inv = 1.0 / static_cast<double>(batch_size);
        LossParts parts{scale(cls_sum, inv), scale(sem_sum, inv), scale(kl_sum, inv),
                        scale(deb_sum, inv)};
        return total_loss(parts, settings);
    };
    std::vector<Tensor> tensors;
    for (auto& [name, t] : model.parameters()) tensors.push_back(t);
    return grad_check(loss, tensors, h, coords_per_param);
}

}  // namespace psvma
