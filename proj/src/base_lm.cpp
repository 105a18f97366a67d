#include "icl/base_lm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace icl {

Vocab::Vocab() {
    add("<begin>");
    add("<end>");
}

int Vocab::add(const std::string& name) {
    if (name.empty() || name.find_first_of(" \t\r\n") != std::string::npos)
        throw LmError("invalid token string '" + name + "'");
    auto it = index_.find(name);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(names_.size());
    names_.push_back(name);
    index_.emplace(name, id);
    return id;
}

int Vocab::id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LmError("unknown token '" + name + "'");
    return it->second;
}

bool Vocab::contains(const std::string& name) const { return index_.count(name) > 0; }

const std::string& Vocab::name(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= names_.size()) throw LmError("unknown token id");
    return names_[static_cast<std::size_t>(id)];
}

void Vocab::set_delims(std::vector<int> ids) {
    for (int d : ids) {
        if (d < 0 || static_cast<std::size_t>(d) >= names_.size()) throw LmError("delimiter outside vocabulary");
        if (d == begin() || d == end()) throw LmError("<begin>/<end> cannot be delimiters");
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    delims_ = std::move(ids);
}

bool Vocab::is_delim(int id) const { return std::binary_search(delims_.begin(), delims_.end(), id); }

namespace {

std::vector<int> context_key(const NGramModel& m, std::span<const int> context) {
    const std::size_t k = static_cast<std::size_t>(m.order - 1);
    std::vector<int> key(k, m.begin_id);
    const std::size_t take = std::min(k, context.size());
    std::copy(context.end() - static_cast<std::ptrdiff_t>(take), context.end(),
              key.end() - static_cast<std::ptrdiff_t>(take));
    return key;
}

double slow_log_cond(const NGramModel& m, int token, const std::vector<int>& key) {
    double c = 0.0, total = 0.0;
    if (auto it = m.counts.find(key); it != m.counts.end()) {
        if (auto jt = it->second.find(token); jt != it->second.end()) c = jt->second;
        total = m.totals.at(key);
    }
    return std::log((c + m.alpha) / (total + m.alpha * static_cast<double>(m.vocab_size)));
}

void check_token(const NGramModel& m, int token) {
    if (token < 0 || static_cast<std::size_t>(token) >= m.vocab_size) throw LmError("unknown token id");
}

}  // namespace

void NGramModel::rebuild_cache() {
    dense.clear();
    if (order > 2) return;
    const std::size_t rows = order == 1 ? 1 : vocab_size;
    dense.assign(rows * vocab_size, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<int> key;
        if (order == 2) key.push_back(static_cast<int>(r));
        for (std::size_t t = 0; t < vocab_size; ++t)
            dense[r * vocab_size + t] = slow_log_cond(*this, static_cast<int>(t), key);
    }
}

NGramModel fit_ngram(const std::vector<TokenSeq>& corpus, int order, double alpha,
                     std::size_t vocab_size, double nu, int begin_id) {
    if (order < 1) throw LmError("order must be at least 1");
    if (!(alpha > 0.0)) throw LmError("smoothing must be positive");
    if (!(nu > 0.0 && nu < 1.0)) throw LmError("floor must lie in (0,1)");
    std::size_t tokens = 0;
    for (const auto& doc : corpus) tokens += doc.size();
    if (tokens == 0) throw LmError("empty corpus");

    NGramModel m;
    m.order = order;
    m.alpha = alpha;
    m.nu = nu;
    m.vocab_size = vocab_size;
    m.begin_id = begin_id;
    for (const auto& doc : corpus) {
        for (std::size_t t = 0; t < doc.size(); ++t) {
            check_token(m, doc[t]);
            if (doc[t] == m.begin_id) continue;
            auto key = context_key(m, std::span<const int>(doc.data(), t));
            m.counts[key][doc[t]] += 1.0;
            m.totals[key] += 1.0;
        }
    }
    m.rebuild_cache();
    return m;
}

double log_cond(const NGramModel& m, int token, std::span<const int> context) {
    check_token(m, token);
    if (m.order == 1) return m.dense[static_cast<std::size_t>(token)];
    if (m.order == 2) {
        const int prev = context.empty() ? m.begin_id : context.back();
        if (prev < 0) return slow_log_cond(m, token, {prev});
        check_token(m, prev);
        return m.dense[static_cast<std::size_t>(prev) * m.vocab_size + static_cast<std::size_t>(token)];
    }
    for (int c : context) check_token(m, c);
    return slow_log_cond(m, token, context_key(m, context));
}

double chunk_logprob(const NGramModel& m, std::span<const int> chunk) {
    return prefix_logprob(m, chunk) + log_cond(m, m.end_id, chunk);
}

double prefix_logprob(const NGramModel& m, std::span<const int> tokens) {
    double s = 0.0;
    for (std::size_t t = 0; t < tokens.size(); ++t) s += log_cond(m, tokens[t], tokens.first(t));
    return s;
}

double cond_prob_oracle(const NGramModel& m, const CondQuery& q) {
    if (q.err) return std::log(m.nu);
    if (q.j > q.i) throw LmError("oracle query needs j <= i");
    if (q.i >= q.z.size()) throw LmError("oracle query position outside sequence");
    if (q.j == q.i) return 0.0;
    return log_cond(m, q.z[q.i], q.z.subspan(q.j + 1, q.i - q.j - 1));
}

std::vector<TokenSeq> read_corpus(const std::string& path, Vocab& vocab) {
    std::ifstream in(path);
    if (!in) throw LmError("cannot open corpus '" + path + "'");
    std::vector<TokenSeq> docs;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        TokenSeq doc{vocab.begin()};
        std::string tok;
        while (ss >> tok) doc.push_back(vocab.add(tok));
        if (doc.size() == 1) continue;
        doc.push_back(vocab.end());
        docs.push_back(std::move(doc));
    }
    return docs;
}

void save_model(const std::string& path, const NGramModel& m, const Vocab& vocab) {
    std::ofstream out(path);
    if (!out) throw LmError("cannot write model '" + path + "'");
    out << std::setprecision(17);
    out << "#ngram\torder=" << m.order << "\talpha=" << m.alpha << "\tnu=" << m.nu << '\n';
    out << "#vocab";
    for (std::size_t i = 0; i < vocab.size(); ++i) out << '\t' << vocab.name(static_cast<int>(i));
    out << '\n';
    for (const auto& [ctx, row] : m.counts)
        for (const auto& [tok, c] : row) {
            for (int id : ctx) out << vocab.name(id) << '\t';
            out << vocab.name(tok) << '\t' << c << '\n';
        }
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
        const auto nx = line.find('\t', pos);
        f.push_back(line.substr(pos, nx - pos));
        if (nx == std::string::npos) break;
        pos = nx + 1;
    }
    return f;
}

double header_value(const std::string& field, const std::string& key) {
    if (field.rfind(key + "=", 0) != 0) throw LmError("model header: expected " + key);
    try {
        return std::stod(field.substr(key.size() + 1));
    } catch (const std::exception&) {
        throw LmError("model header: bad value for " + key);
    }
}

}  // namespace

LoadedModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LmError("cannot open model '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw LmError("model file is empty");
    auto h = split_tabs(line);
    if (h.size() != 4 || h[0] != "#ngram") throw LmError("model header malformed");
    LoadedModel lm;
    NGramModel& m = lm.model;
    m.order = static_cast<int>(header_value(h[1], "order"));
    m.alpha = header_value(h[2], "alpha");
    m.nu = header_value(h[3], "nu");
    if (m.order < 1 || !(m.alpha > 0) || !(m.nu > 0 && m.nu < 1)) throw LmError("model header out of range");

    if (!std::getline(in, line)) throw LmError("model vocabulary line missing");
    auto v = split_tabs(line);
    if (v.size() < 3 || v[0] != "#vocab" || v[1] != "<begin>" || v[2] != "<end>")
        throw LmError("model vocabulary line malformed");
    for (std::size_t i = 3; i < v.size(); ++i) lm.vocab.add(v[i]);
    m.vocab_size = lm.vocab.size();

    const std::size_t k = static_cast<std::size_t>(m.order - 1);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_tabs(line);
        if (f.size() != k + 2) throw LmError("model row has wrong field count");
        std::vector<int> ctx;
        for (std::size_t i = 0; i < k; ++i) ctx.push_back(lm.vocab.id(f[i]));
        const int tok = lm.vocab.id(f[k]);
        double c = 0.0;
        try {
            c = std::stod(f[k + 1]);
        } catch (const std::exception&) {
            throw LmError("model row has bad count");
        }
        if (c < 0) throw LmError("model row has negative count");
        m.counts[ctx][tok] += c;
        m.totals[ctx] += c;
    }
    m.rebuild_cache();
    return lm;
}

}  // namespace icl
