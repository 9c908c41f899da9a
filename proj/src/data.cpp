#include "psvma/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace psvma {

namespace {

[[noreturn]] void parse_fail(const std::string& path, std::size_t line, const std::string& msg) {
    throw std::runtime_error(path + ": line " + std::to_string(line) + ": " + msg);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
    std::uint64_t state = a;
    std::uint64_t h = splitmix64(state);
    state ^= b + 0x9e3779b97f4a7c15ULL;
    h ^= splitmix64(state);
    state ^= c + 0xc2b2ae3d27d4eb4fULL;
    h ^= splitmix64(state);
    state ^= d + 0x165667b19e3779f9ULL;
    h ^= splitmix64(state);
    return h;
}

bool AttributeTable::is_seen(std::size_t class_id) const {
    return std::find(seen_ids.begin(), seen_ids.end(), class_id) != seen_ids.end();
}

std::size_t AttributeTable::seen_index(std::size_t class_id) const {
    auto it = std::find(seen_ids.begin(), seen_ids.end(), class_id);
    if (it == seen_ids.end())
        throw std::invalid_argument("seen_index: class " + std::to_string(class_id) +
                                    " is not a seen class");
    return static_cast<std::size_t>(it - seen_ids.begin());
}

void AttributeTable::validate() const {
    if (prototypes.size() != num_classes || class_names.size() != num_classes)
        throw std::runtime_error("attribute table: class count mismatch");
    if (groups.size() != num_groups)
        throw std::runtime_error("attribute table: declared " + std::to_string(num_groups) +
                                 " groups, found " + std::to_string(groups.size()));
    for (std::size_t y = 0; y < num_classes; ++y) {
        if (prototypes[y].size() != num_attributes)
            throw std::runtime_error("attribute table: class " + std::to_string(y) +
                                     " has wrong attribute count");
        bool nonzero = false;
        for (double v : prototypes[y]) nonzero = nonzero || v != 0.0;
        if (!nonzero)
            throw std::runtime_error("attribute table: class " + std::to_string(y) +
                                     " prototype is all-zero");
    }
    std::vector<int> owner(num_attributes, -1);
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::size_t a : groups[g]) {
            if (a >= num_attributes)
                throw std::runtime_error("attribute table: group index out of range");
            if (owner[a] != -1)
                throw std::runtime_error("attribute table: attribute " + std::to_string(a) +
                                         " belongs to multiple groups");
            owner[a] = static_cast<int>(g);
        }
    for (std::size_t a = 0; a < num_attributes; ++a)
        if (owner[a] == -1)
            throw std::runtime_error("attribute table: attribute " + std::to_string(a) +
                                     " belongs to no group");
    std::vector<char> mark(num_classes, 0);
    for (std::size_t id : seen_ids) {
        if (id >= num_classes) throw std::runtime_error("attribute table: seen id out of range");
        mark[id] |= 1;
    }
    for (std::size_t id : unseen_ids) {
        if (id >= num_classes)
            throw std::runtime_error("attribute table: unseen id out of range");
        if (mark[id] & 1)
            throw std::runtime_error("attribute table: class " + std::to_string(id) +
                                     " appears in both splits");
        mark[id] |= 2;
    }
    for (std::size_t y = 0; y < num_classes; ++y)
        if (!mark[y])
            throw std::runtime_error("attribute table: class " + std::to_string(y) +
                                     " missing from both splits");
}

AttributeTable load_attribute_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open attribute table: " + path);

    AttributeTable t;
    bool normalized = true;
    std::size_t declared_seen_count = 0;
    std::string line;
    std::size_t lineno = 0;

    // header
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream hs(line);
        std::string tok;
        bool have_classes = false, have_seen_count = false, have_attrs = false,
             have_groups = false;
        while (hs >> tok) {
            auto eq = tok.find('=');
            if (eq == std::string::npos)
                parse_fail(path, lineno, "malformed header token '" + tok + "'");
            const std::string key = tok.substr(0, eq);
            const std::string val = tok.substr(eq + 1);
            try {
                if (key == "classes") { t.num_classes = std::stoul(val); have_classes = true; }
                else if (key == "seen") { declared_seen_count = std::stoul(val); have_seen_count = true; }
                else if (key == "attributes") { t.num_attributes = std::stoul(val); have_attrs = true; }
                else if (key == "groups") { t.num_groups = std::stoul(val); have_groups = true; }
                else if (key == "normalized") { normalized = std::stoul(val) != 0; }
                else parse_fail(path, lineno, "unknown header key '" + key + "'");
            } catch (const std::invalid_argument&) {
                parse_fail(path, lineno, "malformed header value '" + val + "'");
            }
        }
        if (!have_classes || !have_seen_count || !have_attrs || !have_groups)
            parse_fail(path, lineno, "header must declare classes, seen, attributes, groups");
        t.class_names.assign(t.num_classes, "");
        t.prototypes.assign(t.num_classes, {});
        have_header = true;
        break;
    }
    if (!have_header || t.num_classes == 0)
        throw std::runtime_error(path + ": empty attribute table");

    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "class") {
            std::size_t id;
            std::string name, colon;
            if (!(ls >> id >> name >> colon) || colon != ":")
                parse_fail(path, lineno, "malformed class row");
            if (id >= t.num_classes) parse_fail(path, lineno, "class id out of range");
            if (!t.prototypes[id].empty()) parse_fail(path, lineno, "duplicate class id");
            std::vector<double> vals;
            double v;
            while (ls >> v) vals.push_back(v);
            if (vals.size() != t.num_attributes)
                parse_fail(path, lineno, "expected " + std::to_string(t.num_attributes) +
                                             " attribute values, got " +
                                             std::to_string(vals.size()));
            t.class_names[id] = name;
            t.prototypes[id] = std::move(vals);
        } else if (kind == "group") {
            std::size_t gid;
            std::string colon;
            if (!(ls >> gid >> colon) || colon != ":")
                parse_fail(path, lineno, "malformed group row");
            if (gid != t.groups.size())
                parse_fail(path, lineno, "group rows must appear in order");
            std::vector<std::size_t> idx;
            std::size_t a;
            while (ls >> a) idx.push_back(a);
            if (idx.empty()) parse_fail(path, lineno, "empty group");
            t.groups.push_back(std::move(idx));
        } else if (kind == "seen" || kind == "unseen") {
            std::string colon;
            if (!(ls >> colon) || colon != ":") parse_fail(path, lineno, "malformed split row");
            auto& ids = (kind == "seen") ? t.seen_ids : t.unseen_ids;
            std::size_t id;
            while (ls >> id) ids.push_back(id);
        } else {
            parse_fail(path, lineno, "unknown row kind '" + kind + "'");
        }
    }

    for (std::size_t y = 0; y < t.num_classes; ++y)
        if (t.prototypes[y].empty())
            throw std::runtime_error(path + ": class " + std::to_string(y) + " has no row");
    if (declared_seen_count != t.seen_ids.size())
        throw std::runtime_error(path + ": header declares " +
                                 std::to_string(declared_seen_count) + " seen classes, found " +
                                 std::to_string(t.seen_ids.size()));

    if (!normalized) {
        // min-max rescale each attribute column to [0,1]
        for (std::size_t a = 0; a < t.num_attributes; ++a) {
            double lo = t.prototypes[0][a], hi = lo;
            for (std::size_t y = 1; y < t.num_classes; ++y) {
                lo = std::min(lo, t.prototypes[y][a]);
                hi = std::max(hi, t.prototypes[y][a]);
            }
            const double span = hi - lo;
            for (std::size_t y = 0; y < t.num_classes; ++y)
                t.prototypes[y][a] = span > 0.0 ? (t.prototypes[y][a] - lo) / span : 0.0;
        }
    }

    try {
        t.validate();
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    return t;
}

void save_attribute_table(const AttributeTable& t, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write attribute table: " + path);
    out << "classes=" << t.num_classes << " seen=" << t.seen_ids.size()
        << " attributes=" << t.num_attributes << " groups=" << t.num_groups << "\n";
    for (std::size_t y = 0; y < t.num_classes; ++y) {
        out << "class " << y << ' ' << t.class_names[y] << " :";
        for (double v : t.prototypes[y]) out << ' ' << fmt_double(v);
        out << "\n";
    }
    for (std::size_t g = 0; g < t.groups.size(); ++g) {
        out << "group " << g << " :";
        for (std::size_t a : t.groups[g]) out << ' ' << a;
        out << "\n";
    }
    out << "seen :";
    for (std::size_t id : t.seen_ids) out << ' ' << id;
    out << "\nunseen :";
    for (std::size_t id : t.unseen_ids) out << ' ' << id;
    out << "\n";
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.seen >= spec.classes)
        throw std::invalid_argument("synthetic spec: seen must be smaller than classes");
    if (spec.noise < 0.0) throw std::invalid_argument("synthetic spec: negative noise");
    if (spec.groups == 0 || spec.groups > spec.attributes)
        throw std::invalid_argument("synthetic spec: invalid group count");

    Dataset ds;
    ds.noise = spec.noise;
    ds.signal = spec.signal;
    AttributeTable& t = ds.table;
    t.num_classes = spec.classes;
    t.num_attributes = spec.attributes;
    t.num_groups = spec.groups;

    // contiguous attribute groups
    t.groups.resize(spec.groups);
    for (std::size_t g = 0; g < spec.groups; ++g) {
        const std::size_t lo = g * spec.attributes / spec.groups;
        const std::size_t hi = (g + 1) * spec.attributes / spec.groups;
        for (std::size_t a = lo; a < hi; ++a) t.groups[g].push_back(a);
    }

    std::mt19937_64 rng(mix_seed(spec.seed, 0x7ab1e5));
    std::uniform_real_distribution<double> strong(0.5, 1.0);
    std::uniform_real_distribution<double> weak(0.0, 0.1);
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    t.class_names.reserve(spec.classes);
    t.prototypes.assign(spec.classes, std::vector<double>(spec.attributes, 0.0));
    for (std::size_t y = 0; y < spec.classes; ++y) {
        t.class_names.push_back("class" + std::to_string(y));
        for (std::size_t g = 0; g < spec.groups; ++g) {
            const auto& idx = t.groups[g];
            std::vector<char> active(idx.size(), 0);
            bool any = false;
            for (std::size_t k = 0; k < idx.size(); ++k) {
                active[k] = coin(rng) < 0.5;
                any = any || active[k];
            }
            if (!any) active[rng() % idx.size()] = 1;
            for (std::size_t k = 0; k < idx.size(); ++k)
                t.prototypes[y][idx[k]] = active[k] ? strong(rng) : weak(rng);
        }
    }

    for (std::size_t y = 0; y < spec.classes; ++y)
        (y < spec.seen ? t.seen_ids : t.unseen_ids).push_back(y);
    t.validate();

    auto emit = [&](std::vector<Sample>& out, const std::vector<std::size_t>& ids,
                    std::size_t per_class, std::uint64_t tag) {
        for (std::size_t y : ids)
            for (std::size_t i = 0; i < per_class; ++i)
                out.push_back({mix_seed(spec.seed, tag, y, i), y});
    };
    emit(ds.train, t.seen_ids, spec.train_per_class, 1);
    emit(ds.test_seen, t.seen_ids, spec.test_per_class, 2);
    emit(ds.test_unseen, t.unseen_ids, spec.test_per_class, 3);
    return ds;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_partition(
    const AttributeTable& table, const std::vector<Sample>& samples) {
    std::vector<Sample> seen, unseen;
    for (const Sample& s : samples) {
        if (s.label >= table.num_classes)
            throw std::invalid_argument("split_partition: unknown label id " +
                                        std::to_string(s.label));
        (table.is_seen(s.label) ? seen : unseen).push_back(s);
    }
    return {std::move(seen), std::move(unseen)};
}

void save_manifest(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    auto dump = [&](const char* split, const std::vector<Sample>& v) {
        for (const Sample& s : v) out << split << ' ' << s.label << ' ' << s.image_seed << "\n";
    };
    dump("train", ds.train);
    dump("test_seen", ds.test_seen);
    dump("test_unseen", ds.test_unseen);
}

void load_manifest(Dataset& ds, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    ds.train.clear();
    ds.test_seen.clear();
    ds.test_unseen.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string split;
        std::size_t label;
        std::uint64_t seed;
        if (!(ls >> split >> label >> seed)) parse_fail(path, lineno, "malformed sample row");
        if (label >= ds.table.num_classes) parse_fail(path, lineno, "label out of range");
        Sample s{seed, label};
        if (split == "train") ds.train.push_back(s);
        else if (split == "test_seen") ds.test_seen.push_back(s);
        else if (split == "test_unseen") ds.test_unseen.push_back(s);
        else parse_fail(path, lineno, "unknown split '" + split + "'");
    }
}

std::vector<double> instance_attributes(const AttributeTable& table, const Sample& sample,
                                        double noise) {
    if (sample.label >= table.num_classes)
        throw std::invalid_argument("instance_attributes: unknown label id " +
                                    std::to_string(sample.label));
    const auto& proto = table.prototypes[sample.label];
    std::vector<double> inst(proto.size());
    std::mt19937_64 rng(sample.image_seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t a = 0; a < proto.size(); ++a) inst[a] = proto[a] + noise * gauss(rng);
    return inst;
}

}  // namespace psvma
