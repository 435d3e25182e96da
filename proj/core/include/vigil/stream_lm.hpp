#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vigil/attention.hpp"
#include "vigil/optim.hpp"
#include "vigil/rng.hpp"
#include "vigil/synth.hpp"
#include "vigil/task.hpp"
#include "vigil/vision.hpp"
#include "vigil/vocab.hpp"

namespace vigil {

// Interleaved visual-block / text-token sequence with the supervision
// flags. Per position i:
//   l[i] = 1  iff the token at i is a supervised response token
//   f[i] = 1  iff i is the last token of a frame block and l[i+1] == 0
// so f marks exactly the "stay silent" gate decisions.
struct InterleavedSequence {
  struct Item {
    int block = -1;  // index into blocks, or
    int token = -1;  // vocab id
    bool is_block() const { return block >= 0; }
  };

  std::vector<Item> items;
  std::vector<TokenBlock> blocks;        // transformed visual tokens
  std::vector<int> token_at;             // per position; -1 on visual rows
  std::vector<std::uint8_t> l, f;
  std::vector<int> block_final_position; // per block, position of its last row

  int positions() const { return static_cast<int>(token_at.size()); }
  void validate() const;  // flag consistency asserts
};

// Extra unanswered queries to splice into the stream (tokens only).
struct QueryInsert {
  int frame = 0;
  std::vector<std::string> tokens;
};

// Frame blocks in time order, the standing task prompt up front,
// ground-truth responses right after the frame block at their timestamp,
// analysis queries (inputs, unsupervised) followed by their supervised
// answers. Throws AlignmentError when a record's frame falls outside the
// provided blocks.
InterleavedSequence build_interleaved(const AnnotationSet& annotations, TaskMode mode,
                                      const std::vector<TokenBlock>& blocks,
                                      const std::vector<QueryInsert>& query_schedule,
                                      const Vocab& vocab);

// ---- low-rank adapters ------------------------------------------------

// Additive correction W + (alpha/r) * A @ B on a frozen linear layer.
// B starts at zero, so a fresh adapter is a no-op.
struct LoRAAdapter {
  Matrix a;  // d_in x r
  Matrix b;  // r x d_out
  double alpha = 8.0;
  int rank() const { return a.cols(); }
  double scaling() const { return alpha / rank(); }
};

struct LoRASpec {
  int rank = 4;
  double alpha = 8.0;
  // Layer names to adapt; empty means every linear layer.
  std::vector<std::string> targets;
};

struct StreamLMConfig {
  int d_model = 32;
  int n_heads = 4;
  int ffn_mult = 4;
  int n_layers = 2;
  MHSAConfig mhsa() const { return MHSAConfig{d_model, n_heads, ffn_mult}; }
};

// Toy causal LM over interleaved visual and text tokens. The LM head
// covers the full vocabulary, including the streaming silence token, at
// every position.
struct StreamLM {
  StreamLMConfig cfg;
  Vocab vocab;
  Matrix embed;   // V x d
  Matrix w_proj;  // d x d, visual-to-LM projector (identity at init)
  std::vector<MHSABlock> blocks;
  Matrix lnf_gain, lnf_bias;
  Matrix w_head;  // d x V
  std::map<std::string, LoRAAdapter> adapters;

  static StreamLM init(const StreamLMConfig& cfg, const Vocab& vocab, SeededRng& rng);

  // Linear layer names: lm.proj, lm.blk<i>.{wq,wk,wv,wo,w1,w2}, lm.head.
  std::vector<std::string> linear_layer_names() const;
  const Matrix& base_weight(const std::string& name) const;
  Matrix& base_weight(const std::string& name);
  Matrix effective_weight(const std::string& name) const;

  // Blocks/projector/head with adapters folded in on the fly (the base
  // weights stay untouched).
  std::vector<MHSABlock> effective_blocks() const;
};

// Copy of the model with fresh zero-impact adapters attached. Throws
// RankError when the rank exceeds a target's smaller dimension.
StreamLM apply_lora(const StreamLM& model, const LoRASpec& spec, SeededRng& rng);
// Folds every adapter into its base weight and removes it.
void merge_lora(StreamLM& model);

// Causal mask with response runs hidden from everything after them: a
// supervised response token is visible only inside its own run. Frames and
// queries after a response therefore see the exact context a live session
// sees, where generated replies do not linger in the stream.
Matrix interleaved_attention_mask(const InterleavedSequence& seq);

// Full forward under the interleaved mask: per-position probability rows
// over the vocabulary. Visual blocks must already be relation-transformed.
Matrix lm_forward(const StreamLM& model, const InterleavedSequence& seq);

// Streaming state: bounded KV cache plus the absolute position counter.
// Weights are materialized once at construction.
struct LMStream {
  std::vector<MHSABlock> blocks;
  Matrix proj, head;
  Matrix lnf_gain, lnf_bias;
  KVCache cache;
  std::int64_t next_position = 0;
};

LMStream make_lm_stream(const StreamLM& model, int cache_len);
// Probability rows for the new visual tokens (projected inside).
Matrix lm_stream_feed_visual(LMStream& stream, const Matrix& vhat_tokens);
// Probability rows for new text tokens.
Matrix lm_stream_feed_tokens(LMStream& stream, const StreamLM& model, const std::vector<int>& ids);

// ---- joint loss ---------------------------------------------------------

struct JointLoss {
  double total = 0.0;
  double text_part = 0.0;  // total == text_part + w * eos_part, exactly
  double eos_part = 0.0;
  int text_positions = 0;
  int eos_positions = 0;
  int underflow_count = 0;  // probabilities floored at 1e-12
};

// Masked next-token loss over response tokens plus w times the silence
// loss at gate positions, normalized by the number of positions carrying
// an active term (the silence positions only count when w > 0, which
// keeps exp(loss at w=0) equal to the perplexity metric).
JointLoss joint_loss(const Matrix& dists, const InterleavedSequence& seq, double w,
                     const Vocab& vocab);

// ---- stage-2 fine-tuning --------------------------------------------------

struct AnnotatedStream {
  int id = 0;
  FrameSequence frames;
  AnnotationSet annotations;
};

struct FinetuneOptions {
  double w = 1.0;
  int epochs = 2;
  double lr = 5e-3;
  std::vector<TaskMode> modes = {TaskMode::VAP, TaskMode::VAD, TaskMode::VAA};
  bool use_strd = true;           // false bypasses the relation module entirely
  bool train_strd_output = true;  // the only STRD piece stage 2 touches
};

struct FinetuneResult {
  std::vector<double> epoch_loss;
  std::int64_t steps = 0;
};

class STRDModule;  // strd.hpp

// Trains the adapters (and the relation module's output layer) on the
// joint loss with teacher forcing; everything else stays frozen.
FinetuneResult train_finetune(StreamLM& model, STRDModule& strd, const VisionEncoder& encoder,
                              const std::vector<AnnotatedStream>& dataset,
                              const FinetuneOptions& options, SeededRng& rng);

// Mean joint loss of the current model over a stream set (no updates).
JointLoss finetune_eval(const StreamLM& model, const STRDModule* strd,
                        const VisionEncoder& encoder, const std::vector<AnnotatedStream>& dataset,
                        const std::vector<TaskMode>& modes, double w);

// The interleaved sequence a stream/mode pair trains and evaluates on.
// strd == nullptr bypasses the relation module (the ablation arm).
InterleavedSequence build_stream_sequence(const StreamLM& model, const STRDModule* strd,
                                          const VisionEncoder& encoder,
                                          const AnnotatedStream& stream, TaskMode mode);

}  // namespace vigil
