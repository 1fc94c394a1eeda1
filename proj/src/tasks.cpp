#include "ptqlab/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "ptqlab/hash.hpp"

namespace ptqlab {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::PatternCompletion: return "pattern_completion";
    case TaskKind::HeldoutTokenAccuracy: return "heldout_token_accuracy";
  }
  return "copy";
}

TaskKind parse_task_kind(std::string_view text) {
  if (text == "copy") return TaskKind::Copy;
  if (text == "reverse") return TaskKind::Reverse;
  if (text == "pattern_completion") return TaskKind::PatternCompletion;
  if (text == "heldout_token_accuracy") return TaskKind::HeldoutTokenAccuracy;
  throw ParameterError("unknown task '" + std::string(text) + "'");
}

namespace {

int random_letter(Rng& rng) { return 'a' + static_cast<int>(rng.below(26)); }

}  // namespace

TaskExample make_task_example(TaskKind kind, Rng& rng) {
  TaskExample ex;
  ex.kind = kind;
  ex.prompt.push_back(tokens::kBos);
  switch (kind) {
    case TaskKind::Copy:
    case TaskKind::Reverse: {
      std::vector<int> body(kTaskBodyLen);
      for (auto& c : body) c = random_letter(rng);
      ex.prompt.insert(ex.prompt.end(), body.begin(), body.end());
      ex.prompt.push_back(kind == TaskKind::Copy ? '=' : '<');
      if (kind == TaskKind::Reverse) std::reverse(body.begin(), body.end());
      ex.completion = body;
      break;
    }
    case TaskKind::PatternCompletion: {
      const std::size_t period = 2 + rng.below(2);
      // Distinct letters inside one period.
      std::vector<int> unit;
      while (unit.size() < period) {
        const int c = random_letter(rng);
        if (std::find(unit.begin(), unit.end(), c) == unit.end()) unit.push_back(c);
      }
      for (std::size_t i = 0; i < kPromptLen - 1; ++i) ex.prompt.push_back(unit[i % period]);
      for (std::size_t i = 0; i < kCompletionLen; ++i) {
        ex.completion.push_back(unit[(kPromptLen - 1 + i) % period]);
      }
      break;
    }
    case TaskKind::HeldoutTokenAccuracy:
      throw ParameterError("heldout_token_accuracy is a metric, not a generator");
  }
  return ex;
}

void TaskMix::validate() const {
  for (const double w : {copy, reverse, pattern, text}) {
    if (!(w >= 0.0)) throw ParameterError("task mix weights must be non-negative");
  }
  if (copy + reverse + pattern + text <= 0.0) {
    throw ParameterError("task mix must have positive total weight");
  }
}

nlohmann::json TaskMix::to_json() const {
  return {{"copy", copy}, {"reverse", reverse}, {"pattern", pattern}, {"text", text}};
}

TaskMix TaskMix::from_json(const nlohmann::json& j) {
  TaskMix m;
  m.copy = j.value("copy", m.copy);
  m.reverse = j.value("reverse", m.reverse);
  m.pattern = j.value("pattern", m.pattern);
  m.text = j.value("text", m.text);
  m.validate();
  return m;
}

CorpusSampler::CorpusSampler(TaskMix mix, std::string text)
    : mix_(mix), text_(std::move(text)) {
  mix_.validate();
  if (mix_.text > 0.0 && text_.size() < kSequenceLen) {
    throw ContractError("text shard is shorter than one training window");
  }
  for (const char c : text_) {
    if (static_cast<unsigned char>(c) >= tokens::kMask) {
      throw ContractError("corpus byte outside vocabulary");
    }
  }
}

Sequence CorpusSampler::sample(Rng& rng) const {
  const double total = mix_.copy + mix_.reverse + mix_.pattern + mix_.text;
  double u = rng.uniform() * total;
  Sequence seq;
  if (u < mix_.text) {
    const std::size_t window = kSequenceLen - 1;
    const std::size_t start = rng.below(text_.size() - window + 1);
    seq.tokens.push_back(tokens::kBos);
    for (std::size_t i = 0; i < window; ++i) {
      seq.tokens.push_back(static_cast<unsigned char>(text_[start + i]));
    }
    seq.completion_start = 1;
    return seq;
  }
  u -= mix_.text;
  TaskKind kind = TaskKind::PatternCompletion;
  if (u < mix_.copy) {
    kind = TaskKind::Copy;
  } else if (u < mix_.copy + mix_.reverse) {
    kind = TaskKind::Reverse;
  }
  const TaskExample ex = make_task_example(kind, rng);
  seq.tokens = ex.prompt;
  seq.tokens.insert(seq.tokens.end(), ex.completion.begin(), ex.completion.end());
  seq.completion_start = ex.prompt.size();
  return seq;
}

std::string CorpusSampler::corpus_hash() const {
  std::ostringstream desc;
  desc << "tasks/v1 body=" << kTaskBodyLen << " prompt=" << kPromptLen
       << " completion=" << kCompletionLen << " mix=" << mix_.to_json().dump();
  std::uint64_t h = fnv1a64(desc.str());
  h = fnv1a64(text_, h);
  return hex64(h);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read corpus file " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Batch make_batch(const std::vector<Sequence>& rows, GenerationMode mode, double mask_ratio,
                 Rng& mask_rng) {
  if (rows.empty()) throw ContractError("cannot build an empty batch");
  const std::size_t len = rows.front().tokens.size();
  for (const auto& r : rows) {
    if (r.tokens.size() != len) throw ContractError("batch rows must share one length");
  }
  Batch b;
  b.batch = rows.size();
  if (mode == GenerationMode::AR) {
    b.seq = len - 1;
    for (const auto& r : rows) {
      b.token_ids.insert(b.token_ids.end(), r.tokens.begin(), r.tokens.end() - 1);
      b.targets.insert(b.targets.end(), r.tokens.begin() + 1, r.tokens.end());
    }
    b.loss_mask.assign(b.batch * b.seq, 1);
    return b;
  }
  b.seq = len;
  for (const auto& r : rows) {
    std::vector<std::uint8_t> mask(len, 0);
    bool any = false;
    for (std::size_t t = r.completion_start; t < len; ++t) {
      if (mask_rng.uniform() < mask_ratio) {
        mask[t] = 1;
        any = true;
      }
    }
    if (!any) {
      mask[r.completion_start + mask_rng.below(len - r.completion_start)] = 1;
    }
    for (std::size_t t = 0; t < len; ++t) {
      b.token_ids.push_back(mask[t] ? tokens::kMask : r.tokens[t]);
      b.targets.push_back(r.tokens[t]);
      b.loss_mask.push_back(mask[t]);
    }
  }
  return b;
}

Batch sample_batch(const CorpusSampler& sampler, std::size_t rows, GenerationMode mode,
                   Rng& data_rng, Rng& mask_rng) {
  std::vector<Sequence> seqs;
  seqs.reserve(rows);
  for (std::size_t i = 0; i < rows; ++i) seqs.push_back(sampler.sample(data_rng));
  // Drawn in both modes: AR and diffusion runs consume identical streams.
  const double ratio = mask_rng.uniform(0.1, 0.9);
  return make_batch(seqs, mode, ratio, mask_rng);
}

}  // namespace ptqlab
