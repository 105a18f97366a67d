#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "icl/tf_core.hpp"

namespace icl {

class LmError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Ids 0 and 1 are always <begin> and <end>.
class Vocab {
public:
    Vocab();

    int add(const std::string& name);
    int id(const std::string& name) const;
    bool contains(const std::string& name) const;
    const std::string& name(int id) const;
    std::size_t size() const { return names_.size(); }

    int begin() const { return 0; }
    int end() const { return 1; }

    void set_delims(std::vector<int> ids);
    const std::vector<int>& delims() const { return delims_; }
    bool is_delim(int id) const;

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, int> index_;
    std::vector<int> delims_;
};

struct NGramModel {
    int order = 1;
    double alpha = 1.0;
    double nu = 1e-6;
    std::size_t vocab_size = 0;
    int begin_id = 0;
    int end_id = 1;

    // context (exactly order-1 ids, begin padded) -> token -> count
    std::map<std::vector<int>, std::map<int, double>> counts;
    std::map<std::vector<int>, double> totals;

    // Log-probability table indexed by context id * V + token, for order <= 2.
    std::vector<double> dense;

    void rebuild_cache();
};

struct CondQuery {
    std::span<const int> z;
    std::size_t i = 0;
    std::size_t j = 0;
    bool err = false;
};

// Sequences are counted exactly as given; <begin> targets are skipped.
// begin_id < 0 fits an unframed alphabet with no begin symbol; short
// contexts are then padded with -1.
NGramModel fit_ngram(const std::vector<TokenSeq>& corpus, int order, double alpha,
                     std::size_t vocab_size, double nu = 1e-6, int begin_id = 0);

// Only the last order-1 context tokens matter; shorter contexts are padded
// on the left with <begin>.
double log_cond(const NGramModel& m, int token, std::span<const int> context);

// ln p(<begin> chunk <end>).
double chunk_logprob(const NGramModel& m, std::span<const int> chunk);

// ln p(<begin> tokens) with no end emission.
double prefix_logprob(const NGramModel& m, std::span<const int> tokens);

double cond_prob_oracle(const NGramModel& m, const CondQuery& q);

// One document per line, whitespace separated; each is framed with
// <begin> ... <end>. Unknown strings are added to the vocabulary.
std::vector<TokenSeq> read_corpus(const std::string& path, Vocab& vocab);

void save_model(const std::string& path, const NGramModel& m, const Vocab& vocab);

struct LoadedModel {
    Vocab vocab;
    NGramModel model;
};
LoadedModel load_model(const std::string& path);

}  // namespace icl
