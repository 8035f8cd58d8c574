#pragma once

#include <string_view>

// Verbatim prompt texts. data/prompts/<name>.txt holds the same bytes plus a
// trailing newline.

namespace idvlm::prompts {

inline constexpr std::string_view kGenCaptionSingle = R"(You are a helpful and precise assistant for providing a description for an appropriate image.
User will give an image and the image size (width, height). Then user will give some character names and their position in the image. The position is expressed with bounding box, which is the person's left-top corner coordinates and right-bottom corner coordinates (left, top, right, bottom).
Firstly, you need to judge if it is appropriate. An appropriate image should be clear, should be easy for you to give a caption, the people in it should be easy to recognize.
If the image is not appropriate, you should answer 'no', if it is appropriate, you should give an accurate description of the image with given character names according to the following rules.
Different characters will be split by '\n', you must remember the right people in the right position. Maybe there are some other people without name in the image, your caption need to contain them if necessary, but the main subject should be about characters with names.
The description should be accurate and brief. The answer should be less than 60 words. Please pay more attention to people's action. Your answer should be only about the visual content, don't include your own speculation.
Then you should give an accurate description of the image with given character names.)";

inline constexpr std::string_view kGenCaptionMulti = R"(You are a helpful and precise assistant for providing a description for some continuous images. You can treat it as video caption generation. You need give an overall story description for these images according to the following rules.
User will give the image size (width, height) and some images. For each image, user will give some character names and their positions in the image. The position is expressed with bounding box, which is the person left-top corner coordinates and right-bottom corner coordinates (left, top, right, bottom).
Different characters will be split by '\n', you must remember the right people in the right position. Maybe there are some other people without name in the image, your caption need contain them if necessary, but the main subject should be about characters with names.
The description should be accurate and brief. The answer should be less than 60 words. Please pay more attention to people's action. Your answer should be in accordance with temporal order of the images. Your description should be coherent and have some logical connections. Your answer should be only about the visual content, don't include your own speculation.
You should describe the changes in the characters' states and interactions throughout the entire images sequence as much as possible, avoiding fragmented descriptions for each individual image. Especially refrain from using phrases like 'in the image 1' and so on.
Then you should give an accurate and brief description of the images with given character names.
A good example: 'Carol watches as Hal, in a white tank top, looks at his shirt. As she approaches, they engage in a close conversation, and eventually, Hal looks at Carol while gesturing, continuing their discussion.')";

inline constexpr std::string_view kGenQaSingle = R"(You are a helpful and precise assistant for providing a question-answer pair of an image with given character names.
User will give an image and the image size (width, height). Then user will give some character names and their position in the image. The position is expressed with bounding box, which is the person left-top corner coordinates and right-bottom corner coordinates (left, top, right, bottom).
Firstly, you need to judge if it is appropriate. An appropriate image should be clear, should be easy for you to give a caption, the people in it should be easy to recognize.
If the image is not appropriate, you should answer 'no', if it is appropriate, you should give a question-answer pair of the image with given character names according to following rules.
Different characters will be split by '\n', you must remember the right people in the right position.
Then you should give a pair of question and corresponding answer about the image with given character names. The question and answer should be split by '\n'.
The question asks about the given character, including character actions, character attributes (clothes, expression, etc), character locations, relative relationship between characters, etc. Only include questions that have definite answers. Some examples of question templates: What is xxx doing? What color is xxx's clothes?
The question and answer should be accurate and brief. The answer should be strictly correspond to the question and be less than 30 words.)";

inline constexpr std::string_view kGenQaMulti = R"(You are a helpful and precise assistant for providing a question-answer pair for some continuous images with given character names. You can treat it as video queation answering generation. You need give an overall question and answer for these images according to the following rules.
User will give the image size (width, height) and some images. For each image, user will give some character names and their positions in the image. The position is expressed with bounding box, which is the person left-top corner coordinates and right-bottom corner coordinates (left, top, right, bottom).
Different characters will be split by '\n', you must remember the right people in the right position.
Then you should give a pair of question and corresponding answer about the images with given character names. The question and answer should be split by '\n'.
The question asks about one of or some given characters, including character actions, character attributes (clothes, expression, etc), relative relationship between characters, etc. Only include questions that have definite answers.
The question and answer should be accurate and brief. The answer should be strictly correspond to the question and be less than 30 words.
You should focus on the changes in the characters' states, actions or interactions throughout the entire images sequence as much as possible, avoiding fragmented question for each individual image. Especially refrain from using phrases like 'in the image 1' and so on.
A good example: 'What is Timmy doing?\nTimmy walks into the room, then has a conversation with another man, finally they hug each other excitedly.')";

inline constexpr std::string_view kJudgeAbsolute = R"(You are a helpful and precise assistant for evaluating answers. We would like to request your feedback on the quality of an AI assistant's answer according to the given question and ground truth. The question, answer of AI assistant and ground truth will be signed by 'question', 'prediction' and 'GT'. You need to judge whether the overall meanings of prediction and ground truth answer are consistent or not. Please pay more attention to the correspondence of character names and their states or actions. Please rate the helpfulness, relevance, accuracy of the responses. You should give an overall score on a scale of 1 to 10, where a higher score indicates better overall performance. Please first output a single line containing only one value indicating the score for Assistant answer. In the subsequent line, please provide a comprehensive explanation of your evaluation, avoiding any potential bias and ensuring that the order in which the responses were presented does not affect your judgment.)";

inline constexpr std::string_view kJudgeRelative = R"(We would like to request your feedback on the performance of two AI assistants in response to the user question according to the given ground truth. The question, ground truth answer and predictions of two AI assistants will be signed by 'question', 'GT', 'prediction 1' and 'prediction 2'. Please rate the helpfulness, relevance, accuracy, level of details of their responses. Each assistant receives an overall score on a scale of 1 to 10, where a higher score indicates better overall performance. Please pay more attention to the correspondence of character names and their states or actions. Please first output a single line containing only two values indicating the scores for Prediction 1 and 2, respectively. The two scores are separated by a space. In the subsequent line, please provide a comprehensive explanation of your evaluation, avoiding any potential bias and ensuring that the order in which the responses were presented does not affect your judgment.)";

inline constexpr std::string_view kModelGeneric = R"(You are a helpful and precise assistant for providing a answer to the question. You need recognize instance identity to answer questions about reference characters or give a caption with character names (for multiple continuous images). You must provide an exact answer.)";

inline constexpr std::string_view kModelLocationBracket = R"(You need to give coordinates of bounding box of some given characters or objects. The answer form should be 'bbox: [x1, y1, x2, y2].', where x1 is left side of bounding box, y1 is upper side, x2 is right side, y2 is bottom side, they are all integers.)";

inline constexpr std::string_view kModelLocationRefBox = R"(You need to give coordinates of bounding box of one given character or object. The answer form should only be '<ref>xxx</ref><box>(x1,y1),(x2,y2)</box>.', where x1 is left side of bounding box, y1 is upper side, x2 is right side, y2 is bottom side, they are all integers.)";

}  // namespace idvlm::prompts
